"""Network building blocks.

Everything here is a ``Module``: a small container that tracks parameters
(``Tensor`` attributes), child modules, and non-trainable buffers such as
batch-norm running statistics.  Blocks implement both ``forward`` and a pure
arithmetic ``flops(h, w)`` used by the model profiler; the convention counts
one multiply-add as two FLOPs for convolutions, linear layers and attention
matrix products (plus bias adds), and ignores normalization, activations,
pooling and rearrangements.
"""

import math

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor


def conv_flops(cin: int, cout: int, k: int, oh: int, ow: int, bias: bool = False) -> int:
    f = 2 * k * k * cin * cout * oh * ow
    if bias:
        f += cout * oh * ow
    return f


def linear_flops(n: int, din: int, dout: int, bias: bool = True) -> int:
    f = 2 * n * din * dout
    if bias:
        f += n * dout
    return f


def attention_matmul_flops(n: int, d: int) -> int:
    """QK^T and AV products: 2 * N^2 * D each."""
    return 2 * (2 * n * n * d)


class Module:
    """Minimal parameter container with recursive traversal."""

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_children", {})
        object.__setattr__(self, "_buffers", {})
        object.__setattr__(self, "training", True)

    def __setattr__(self, name, value):
        if isinstance(value, Tensor):
            self._params[name] = value
        elif isinstance(value, (Module, ModuleList)):
            self._children[name] = value
        object.__setattr__(self, name, value)

    def register_buffer(self, name: str, arr: np.ndarray) -> None:
        self._buffers[name] = arr
        object.__setattr__(self, name, arr)

    def named_parameters(self, prefix: str = ""):
        for k, v in self._params.items():
            yield (prefix + k, v)
        for k, child in self._children.items():
            yield from child.named_parameters(prefix + k + ".")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = ""):
        for k, v in self._buffers.items():
            yield (prefix + k, v)
        for k, child in self._children.items():
            yield from child.named_buffers(prefix + k + ".")

    def modules(self):
        yield self
        for child in self._children.values():
            yield from child.modules()

    def train(self, flag: bool = True):
        for m in self.modules():
            object.__setattr__(m, "training", flag)
        return self

    def eval(self):
        return self.train(False)

    def to_dtype(self, dtype):
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        return self

    def param_count(self) -> int:
        return sum(p.size for p in self.parameters())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class ModuleList:
    def __init__(self, mods=()):
        self._mods = list(mods)

    def __iter__(self):
        return iter(self._mods)

    def __len__(self):
        return len(self._mods)

    def __getitem__(self, i):
        return self._mods[i]

    def append(self, m):
        self._mods.append(m)

    def named_parameters(self, prefix: str = ""):
        for i, m in enumerate(self._mods):
            yield from m.named_parameters(f"{prefix}{i}.")

    def named_buffers(self, prefix: str = ""):
        for i, m in enumerate(self._mods):
            yield from m.named_buffers(f"{prefix}{i}.")

    def modules(self):
        for m in self._mods:
            yield from m.modules()


class Conv2d(Module):
    def __init__(self, cin, cout, k, stride=1, padding=None, bias=False, rng=None):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        self.cin, self.cout, self.k = cin, cout, k
        self.stride = stride
        self.padding = k // 2 if padding is None else padding
        fan_in = cin * k * k
        std = math.sqrt(2.0 / fan_in)
        self.weight = Tensor(rng.normal(0.0, std, (cout, cin, k, k)), requires_grad=True)
        self.bias = Tensor(np.zeros(cout), requires_grad=True) if bias else None

    def forward(self, x):
        return T.conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)

    def out_hw(self, h, w):
        return (
            (h + 2 * self.padding - self.k) // self.stride + 1,
            (w + 2 * self.padding - self.k) // self.stride + 1,
        )

    def flops(self, h, w):
        oh, ow = self.out_hw(h, w)
        return conv_flops(self.cin, self.cout, self.k, oh, ow, self.bias is not None), (oh, ow)


class BatchNorm2d(Module):
    def __init__(self, c, momentum=0.03, eps=1e-5):
        super().__init__()
        self.c = c
        self.momentum = momentum
        self.eps = eps
        self.gamma = Tensor(np.ones(c), requires_grad=True)
        self.beta = Tensor(np.zeros(c), requires_grad=True)
        self.register_buffer("running_mean", np.zeros(c, dtype=np.float32))
        self.register_buffer("running_var", np.ones(c, dtype=np.float32))

    def forward(self, x):
        return T.batch_norm2d(
            x, self.gamma, self.beta, self.running_mean, self.running_var,
            training=self.training, momentum=self.momentum, eps=self.eps,
        )


class Linear(Module):
    def __init__(self, din, dout, bias=True, rng=None):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        self.din, self.dout = din, dout
        bound = 1.0 / math.sqrt(din)
        self.weight = Tensor(rng.uniform(-bound, bound, (din, dout)), requires_grad=True)
        self.bias = Tensor(np.zeros(dout), requires_grad=True) if bias else None

    def forward(self, x):
        y = T.matmul(x, self.weight)
        if self.bias is not None:
            y = y + self.bias
        return y

    def flops(self, n):
        return linear_flops(n, self.din, self.dout, self.bias is not None)


class LayerNorm(Module):
    def __init__(self, d, eps=1e-5):
        super().__init__()
        self.eps = eps
        self.gamma = Tensor(np.ones(d), requires_grad=True)
        self.beta = Tensor(np.zeros(d), requires_grad=True)

    def forward(self, x):
        return T.layer_norm(x, self.gamma, self.beta, eps=self.eps)


class ConvBNAct(Module):
    """conv2d -> batch norm -> SiLU, the basic convolution unit."""

    def __init__(self, cin, cout, k=1, stride=1, rng=None):
        super().__init__()
        self.conv = Conv2d(cin, cout, k, stride=stride, bias=False, rng=rng)
        self.bn = BatchNorm2d(cout)

    def forward(self, x):
        return T.silu(self.bn(self.conv(x)))

    def flops(self, h, w):
        return self.conv.flops(h, w)


class Focus(Module):
    """Space-to-depth stem: gather 2x2 pixel neighbourhoods into channels.

    The four stride-2 sub-grids (even/odd row and column parities) are
    concatenated on the channel axis, quadrupling channels while halving the
    spatial extent, then a ConvBNAct projects to ``cout`` (default 2*cin, a
    plain channel doubling).
    """

    def __init__(self, cin, cout=None, k=3, rng=None):
        super().__init__()
        self.cin = cin
        self.cout = 2 * cin if cout is None else cout
        self.proj = ConvBNAct(4 * cin, self.cout, k=k, rng=rng)

    def forward(self, x):
        return self.proj(T.space_to_depth(x))

    def flops(self, h, w):
        return self.proj.flops(h // 2, w // 2)


class Bottleneck(Module):
    """Residual unit used inside CSP layers.

    When the spatial extent is even and larger than 2 the unit mixes through
    the space-to-depth path: rearrange to 4c at half resolution, 1x1
    ConvBNAct, then the 3x3 ConvBNAct still at half resolution, and a
    nearest-neighbour x2 upsample restores the input extent, so the shortcut
    always type-checks.  On odd or tiny maps it degrades to a plain
    1x1 -> 3x3 stack at full resolution.
    """

    def __init__(self, c, shortcut=True, use_focus=True, rng=None):
        super().__init__()
        self.c = c
        self.shortcut = shortcut
        self.use_focus = use_focus
        if use_focus:
            self.mix = ConvBNAct(4 * c, c, k=1, rng=rng)
        else:
            self.mix = ConvBNAct(c, c, k=1, rng=rng)
        self.conv = ConvBNAct(c, c, k=3, rng=rng)

    def forward(self, x):
        if self.use_focus:
            h, w = x.shape[2], x.shape[3]
            if h % 2 or w % 2 or min(h, w) <= 2:
                raise ShapeError(
                    f"bottleneck built for even spatial extents got {h}x{w}; "
                    "rebuild the model for this input size"
                )
            y = T.upsample_nearest2x(self.conv(self.mix(T.space_to_depth(x))))
        else:
            y = self.conv(self.mix(x))
        return x + y if self.shortcut else y

    def flops(self, h, w):
        if self.use_focus:
            f1, _ = self.mix.flops(h // 2, w // 2)
            f2, _ = self.conv.flops(h // 2, w // 2)
        else:
            f1, _ = self.mix.flops(h, w)
            f2, _ = self.conv.flops(h, w)
        return f1 + f2, (h, w)


class CSPLayer(Module):
    """Cross-stage partial layer.

    A 1x1 ConvBNAct projects to ``cout`` and the result is split into two
    half-width paths; one passes through ``n`` bottlenecks, the other is an
    identity bypass.  The halves are concatenated and fused by a final 1x1
    ConvBNAct.  Spatial extent is preserved.
    """

    def __init__(self, cin, cout, n=1, shortcut=True, use_focus=True, rng=None):
        super().__init__()
        if cout % 2:
            raise ShapeError(f"CSPLayer output channels must be even, got {cout}")
        self.cin, self.cout = cin, cout
        self.cv1 = ConvBNAct(cin, cout, k=1, rng=rng)
        self.blocks = ModuleList(
            [Bottleneck(cout // 2, shortcut=shortcut, use_focus=use_focus, rng=rng) for _ in range(n)]
        )
        self.cv2 = ConvBNAct(cout, cout, k=1, rng=rng)

    def forward(self, x):
        y = self.cv1(x)
        half = self.cout // 2
        a = y[:, :half]
        b = y[:, half:]
        for blk in self.blocks:
            b = blk(b)
        return self.cv2(T.concat([a, b], axis=1))

    def flops(self, h, w):
        f, _ = self.cv1.flops(h, w)
        for blk in self.blocks:
            fb, _ = blk.flops(h, w)
            f += fb
        f += self.cv2.flops(h, w)[0]
        return f, (h, w)


class SPP(Module):
    """Spatial pyramid pooling: parallel same-size max pools, concat, 1x1 fuse."""

    def __init__(self, c, kernels=(5, 9, 13), rng=None):
        super().__init__()
        self.c = c
        self.kernels = tuple(kernels)
        self.fuse = ConvBNAct(c * (1 + len(self.kernels)), c, k=1, rng=rng)

    def forward(self, x):
        pools = [x] + [T.maxpool2d(x, k, stride=1, padding=k // 2) for k in self.kernels]
        return self.fuse(T.concat(pools, axis=1))

    def flops(self, h, w):
        return self.fuse.flops(h, w)


class TransformerEncoder(Module):
    """One pre-norm transformer encoder layer without positional encoding.

    Token mixing is pure self-attention over the flattened grid, so the layer
    is equivariant to token permutations.  Attention scale is 1/sqrt(D/heads).
    """

    def __init__(self, d, heads=4, mlp_ratio=2.0, rng=None):
        super().__init__()
        if d % heads:
            raise ShapeError(f"embed dim {d} not divisible by {heads} heads")
        self.d = d
        self.heads = heads
        self.dh = d // heads
        self.scale = 1.0 / math.sqrt(self.dh)
        hidden = int(round(d * mlp_ratio))
        self.hidden = hidden
        self.ln1 = LayerNorm(d)
        self.wq = Linear(d, d, rng=rng)
        self.wk = Linear(d, d, rng=rng)
        self.wv = Linear(d, d, rng=rng)
        self.wo = Linear(d, d, rng=rng)
        self.ln2 = LayerNorm(d)
        self.fc1 = Linear(d, hidden, rng=rng)
        self.fc2 = Linear(hidden, d, rng=rng)

    def _attend(self, x):
        B, N, D = x.shape
        H, Dh = self.heads, self.dh

        def split(t):
            return T.transpose(T.reshape(t, (B, N, H, Dh)), (0, 2, 1, 3))

        q, k, v = split(self.wq(x)), split(self.wk(x)), split(self.wv(x))
        att = T.softmax(T.matmul(q, T.transpose(k, (0, 1, 3, 2))) * self.scale)
        out = T.matmul(att, v)  # (B,H,N,Dh)
        out = T.reshape(T.transpose(out, (0, 2, 1, 3)), (B, N, D))
        return self.wo(out)

    def forward(self, x):
        if x.ndim != 3 or x.shape[-1] != self.d:
            raise ShapeError(f"encoder expects (B,N,{self.d}) tokens, got {x.shape}")
        x = x + self._attend(self.ln1(x))
        x = x + self.fc2(T.silu(self.fc1(self.ln2(x))))
        return x

    def flops(self, n):
        f = self.wq.flops(n) + self.wk.flops(n) + self.wv.flops(n) + self.wo.flops(n)
        f += attention_matmul_flops(n, self.d)
        f += self.fc1.flops(n) + self.fc2.flops(n)
        return f


class SPPTransformer(Module):
    """SPP followed by a transformer encoder over the flattened H*W tokens."""

    def __init__(self, c, heads=4, mlp_ratio=2.0, rng=None):
        super().__init__()
        self.c = c
        self.spp = SPP(c, rng=rng)
        self.encoder = TransformerEncoder(c, heads=heads, mlp_ratio=mlp_ratio, rng=rng)

    def forward(self, x):
        y = self.spp(x)
        B, C, H, W = y.shape
        tokens = T.transpose(T.reshape(y, (B, C, H * W)), (0, 2, 1))
        tokens = self.encoder(tokens)
        return T.reshape(T.transpose(tokens, (0, 2, 1)), (B, C, H, W))

    def flops(self, h, w):
        f = self.spp.flops(h, w)[0]
        f += self.encoder.flops(h * w)
        return f, (h, w)


class DetectHead(Module):
    """Decoupled anchor-free head.

    Each scale gets an independent classification stack (``nc`` logits per
    cell) and regression stack (``4 * reg_bins`` logits per cell encoding
    discrete distributions over the left/top/right/bottom anchor-to-edge
    distances in stride units).  No objectness branch.
    """

    def __init__(self, chs, nc, reg_bins=16, hidden=None, stacks=(1, 1, 1), rng=None):
        super().__init__()
        if len(chs) != len(stacks):
            raise ShapeError("one stack depth per input scale is required")
        self.nc = nc
        self.reg_bins = reg_bins
        self.chs = tuple(chs)
        hidden = tuple(hidden) if hidden is not None else tuple(max(16, c // 2) for c in chs)
        self.hidden = hidden
        cls_branches, reg_branches = [], []
        # Start classification at a low prior so early training is not
        # swamped by the many negative anchors.
        cls_prior = -math.log((1.0 - 0.01) / 0.01)
        for c, hdim, depth in zip(chs, hidden, stacks):
            cls_stack, reg_stack = [], []
            last = c
            for _ in range(depth):
                cls_stack.append(ConvBNAct(last, hdim, k=3, rng=rng))
                reg_stack.append(ConvBNAct(last, hdim, k=3, rng=rng))
                last = hdim
            cls_out = Conv2d(last, nc, 1, bias=True, rng=rng)
            cls_out.bias.data[:] = cls_prior
            reg_out = Conv2d(last, 4 * reg_bins, 1, bias=True, rng=rng)
            cls_branches.append(ModuleListModule(cls_stack + [cls_out]))
            reg_branches.append(ModuleListModule(reg_stack + [reg_out]))
        self.cls_branches = ModuleList(cls_branches)
        self.reg_branches = ModuleList(reg_branches)

    def forward(self, feats):
        if len(feats) != len(self.chs):
            raise ShapeError(f"head expects {len(self.chs)} scales, got {len(feats)}")
        outputs = []
        for f, cls_b, reg_b in zip(feats, self.cls_branches, self.reg_branches):
            outputs.append((cls_b(f), reg_b(f)))
        return outputs

    def flops(self, hws):
        total = 0
        for (h, w), cls_b, reg_b in zip(hws, self.cls_branches, self.reg_branches):
            for branch in (cls_b, reg_b):
                for m in branch.seq:
                    total += m.flops(h, w)[0]
        return total


class ModuleListModule(Module):
    """Sequential container."""

    def __init__(self, mods):
        super().__init__()
        self.seq = ModuleList(mods)

    def forward(self, x):
        for m in self.seq:
            x = m(x)
        return x
