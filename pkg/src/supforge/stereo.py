"""Toy differentiable stereo networks.

Three architectural axes from the robustness study are covered: cost-volume
construction (feature concatenation with a learned fusion head vs. explicit
correlation matching), encoder convolution type (standard vs. deformable
with learned offsets), and adaptive per-slice cost aggregation. All
variants share the same shape: a small shared encoder, a cost volume over
integer disparities at feature resolution, and a soft-argmin readout scaled
back to input resolution.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import container
from .tensor import (
    ShapeError,
    Tape,
    Tensor,
    _bilinear_gather,
    _bilinear_pos_grad,
    _bilinear_scatter_data,
    backward,
    conv2d,
    leaky_relu,
    mul,
    record_op,
    scalar_mul,
    smooth_l1,
    softmax,
    tsum,
    upsample_bilinear,
)

COST_CONCAT = "CONCAT"
COST_CORRELATION = "CORRELATION"
CONV_STANDARD = "STANDARD"
CONV_DEFORMABLE = "DEFORMABLE"


@dataclass
class StereoNetConfig:
    encoder_layers: int = 4
    channels: int = 16
    downsample: int = 2  # power of 2; realized as stride-2 leading layers
    d_max: int = 24
    cost_mode: str = COST_CORRELATION
    conv_mode: str = CONV_STANDARD
    # which encoder layers get learned sampling offsets; None means all when
    # conv_mode is DEFORMABLE, and it is forced empty for STANDARD
    deformable_layer_indices: tuple = None
    use_isa: bool = False
    fusion_hidden: int = 16  # hidden width of the CONCAT fusion head
    leaky_slope: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.cost_mode not in (COST_CONCAT, COST_CORRELATION):
            raise ValueError(f"unknown cost_mode {self.cost_mode!r}")
        if self.conv_mode not in (CONV_STANDARD, CONV_DEFORMABLE):
            raise ValueError(f"unknown conv_mode {self.conv_mode!r}")
        if self.downsample < 1 or self.downsample & (self.downsample - 1):
            raise ValueError(f"downsample must be a power of 2, got {self.downsample}")
        if self.d_max % self.downsample:
            raise ValueError(f"d_max={self.d_max} not divisible by downsample={self.downsample}")
        if self.conv_mode == CONV_STANDARD:
            self.deformable_layer_indices = ()
        else:
            idx = (tuple(range(self.encoder_layers))
                   if self.deformable_layer_indices is None
                   else tuple(sorted(set(int(i) for i in self.deformable_layer_indices))))
            if idx and not set(idx) <= set(range(self.encoder_layers)):
                raise ValueError(f"deformable layer indices {idx} outside "
                                 f"0..{self.encoder_layers - 1}")
            self.deformable_layer_indices = idx

    @property
    def d_max_feature(self) -> int:
        return self.d_max // self.downsample

    def layer_strides(self):
        n_strided = self.downsample.bit_length() - 1
        return [2 if i < n_strided else 1 for i in range(self.encoder_layers)]

    def to_items(self) -> dict:
        return {
            "encoder_layers": self.encoder_layers,
            "channels": self.channels,
            "downsample": self.downsample,
            "d_max": self.d_max,
            "cost_mode": self.cost_mode,
            "conv_mode": self.conv_mode,
            "deformable_layer_indices": self.deformable_layer_indices,
            "use_isa": self.use_isa,
            "fusion_hidden": self.fusion_hidden,
            "leaky_slope": self.leaky_slope,
            "seed": self.seed,
        }

    @classmethod
    def from_items(cls, items: dict) -> "StereoNetConfig":
        raw = items.get("deformable_layer_indices", "")
        idx = tuple(int(v) for v in str(raw).split(",") if str(v).strip() != "")
        return cls(
            encoder_layers=int(items["encoder_layers"]),
            channels=int(items["channels"]),
            downsample=int(items["downsample"]),
            d_max=int(items["d_max"]),
            cost_mode=str(items["cost_mode"]),
            conv_mode=str(items["conv_mode"]),
            deformable_layer_indices=idx,
            use_isa=str(items["use_isa"]).lower() in ("true", "1"),
            fusion_hidden=int(items["fusion_hidden"]),
            leaky_slope=float(items["leaky_slope"]),
            seed=int(items["seed"]),
        )


@dataclass
class LossSpec:
    kind: str = "SMOOTH_L1"
    beta: float = 1.0

    def __post_init__(self):
        if self.kind != "SMOOTH_L1":
            raise ValueError(f"unknown loss kind {self.kind!r}")
        if self.beta <= 0:
            raise ValueError(f"beta must be > 0, got {self.beta}")


@dataclass
class StereoNet:
    config: StereoNetConfig
    params: dict
    loss_trajectory: list = field(default_factory=list)
    trained: bool = False

    def parameter_names(self):
        return sorted(self.params)

    def zero_grads(self):
        for p in self.params.values():
            p.grad = None

    def clone(self) -> "StereoNet":
        params = {k: Tensor(v.data.copy(), requires_grad=True) for k, v in self.params.items()}
        return StereoNet(config=self.config, params=params,
                         loss_trajectory=list(self.loss_trajectory), trained=self.trained)


def _glorot(rng, shape, fan_in, fan_out):
    s = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-s, s, size=shape)


def parameter_count(cfg: StereoNetConfig) -> int:
    """Closed-form parameter count.

    encoder:   sum over layers of C_out*C_in*9 + C_out
    offsets:   per deformable layer, 18*C_in*9 + 18
    score gain: 1
    CONCAT head: M*2C + M (hidden 1x1) + M + 1 (output 1x1)
    ISA:       9 tap weights + offset conv 18*D*9 + 18
    """
    c = cfg.channels
    total = 0
    c_in = 3
    for i in range(cfg.encoder_layers):
        total += c * c_in * 9 + c
        if i in cfg.deformable_layer_indices:
            total += 18 * c_in * 9 + 18
        c_in = c
    total += 1  # score gain
    if cfg.cost_mode == COST_CONCAT:
        m = cfg.fusion_hidden
        total += m * (2 * c) + m + m + 1
    if cfg.use_isa:
        total += 9 + 18 * cfg.d_max_feature * 9 + 18
    return total


def init(cfg: StereoNetConfig) -> StereoNet:
    """Seeded Glorot-uniform weights; offset branches exactly zero at init,
    so DEFORMABLE and STANDARD nets agree bit-exactly until offsets train."""
    rng = np.random.default_rng(cfg.seed)
    params = {}

    def add(name, arr):
        params[name] = Tensor(arr, requires_grad=True)

    c = cfg.channels
    c_in = 3
    for i in range(cfg.encoder_layers):
        add(f"enc{i}.weight", _glorot(rng, (c, c_in, 3, 3), c_in * 9, c * 9))
        add(f"enc{i}.bias", np.zeros(c))
        if i in cfg.deformable_layer_indices:
            add(f"enc{i}.offset_weight", np.zeros((18, c_in, 3, 3)))
            add(f"enc{i}.offset_bias", np.zeros(18))
        c_in = c
    # Learnable score gain mapping the raw volume onto soft-argmin logits;
    # -1 at init makes the readout favor high-correlation disparities.
    add("score.gain", np.array(-1.0))
    if cfg.cost_mode == COST_CONCAT:
        m = cfg.fusion_hidden
        add("fuse.hidden_weight", _glorot(rng, (m, 2 * c, 1, 1), 2 * c, m))
        add("fuse.hidden_bias", np.zeros(m))
        add("fuse.out_weight", _glorot(rng, (1, m, 1, 1), m, 1))
        add("fuse.out_bias", np.zeros(1))
    if cfg.use_isa:
        w = np.zeros((3, 3))
        w[1, 1] = 1.0  # identity aggregation at init
        add("isa.weights", w)
        add("isa.offset_weight", np.zeros((18, cfg.d_max_feature, 3, 3)))
        add("isa.offset_bias", np.zeros(18))
    return StereoNet(config=cfg, params=params)


# ---------------------------------------------------------------------------
# deformable convolution
# ---------------------------------------------------------------------------

def deform_conv2d(input, weight, bias, offsets, stride: int = 1, pad: int = 0) -> Tensor:
    """Convolution whose k*k sampling taps are displaced by learned offsets.

    offsets is [2*k*k, H', W'] on the output grid; channel 2n holds the row
    displacement of tap n (row-major over the kernel window) and 2n+1 the
    column displacement. Fractional positions are read bilinearly, with
    out-of-bounds neighbors contributing zero, which matches the
    zero-padding convention of conv2d. With all offsets zero this is
    bit-identical to conv2d.
    """
    x, w, b, off = (t if isinstance(t, Tensor) else Tensor(t)
                    for t in (input, weight, bias, offsets))
    if x.data.ndim != 3 or w.data.ndim != 4:
        raise ShapeError(f"deform_conv2d needs [C,H,W] input and [C_out,C_in,k,k] "
                         f"weight, got {x.data.shape} and {w.data.shape}")
    c_in, h, wd = x.data.shape
    c_out, c_in_w, k, k2 = w.data.shape
    if k != k2 or k % 2 == 0:
        raise ShapeError(f"deform_conv2d kernel must be square and odd, got {k}x{k2}")
    if c_in_w != c_in:
        raise ShapeError(f"deform_conv2d channel mismatch: {c_in} vs {c_in_w}")
    h2 = (h + 2 * pad - k) // stride + 1
    w2 = (wd + 2 * pad - k) // stride + 1
    if off.data.shape != (2 * k * k, h2, w2):
        raise ShapeError(f"offsets must be [{2 * k * k},{h2},{w2}], got {off.data.shape}")

    n = h2 * w2
    oy, ox = np.meshgrid(np.arange(h2), np.arange(w2), indexing="ij")
    base_y = (oy * stride - pad).reshape(n).astype(np.float64)
    base_x = (ox * stride - pad).reshape(n).astype(np.float64)

    cols = np.empty((c_in, k * k, n))
    caches = []
    positions = []
    for t in range(k * k):
        dy, dx = divmod(t, k)
        ys = base_y + dy + off.data[2 * t].reshape(n)
        xs = base_x + dx + off.data[2 * t + 1].reshape(n)
        vals, cache = _bilinear_gather(x.data, ys, xs)
        cols[:, t, :] = vals
        caches.append(cache)
        positions.append((ys, xs))
    cols_mat = cols.reshape(c_in * k * k, n)
    wmat = w.data.reshape(c_out, c_in * k * k)
    out = (wmat @ cols_mat).reshape(c_out, h2, w2) + b.data[:, None, None]

    def bw(g):
        gmat = g.reshape(c_out, n)
        gw = (gmat @ cols_mat.T).reshape(w.data.shape)
        gb = g.sum(axis=(1, 2))
        gcols = (wmat.T @ gmat).reshape(c_in, k * k, n)
        gx = np.zeros_like(x.data)
        goff = np.empty_like(off.data)
        for t in range(k * k):
            gv = gcols[:, t, :]
            gx += _bilinear_scatter_data(caches[t], gv)
            gys, gxs = _bilinear_pos_grad(caches[t], gv)
            goff[2 * t] = gys.reshape(h2, w2)
            goff[2 * t + 1] = gxs.reshape(h2, w2)
        return gx, gw, gb, goff

    return record_op(out, (x, w, b, off), bw)


# ---------------------------------------------------------------------------
# cost volumes
# ---------------------------------------------------------------------------

def correlation_volume(feat_l, feat_r, n_disp: int) -> Tensor:
    """C(d,p) = mean over channels of feat_l(p) * feat_r(p - d); zero where
    the shifted position leaves the image."""
    fl = feat_l if isinstance(feat_l, Tensor) else Tensor(feat_l)
    fr = feat_r if isinstance(feat_r, Tensor) else Tensor(feat_r)
    if fl.data.shape != fr.data.shape:
        raise ShapeError(f"feature shapes differ: {fl.data.shape} vs {fr.data.shape}")
    c, h, w = fl.data.shape
    if n_disp >= w:
        raise ShapeError(f"n_disp={n_disp} must be < feature width {w}")
    out = np.zeros((n_disp, h, w))
    for d in range(n_disp):
        out[d, :, d:] = (fl.data[:, :, d:] * fr.data[:, :, :w - d]).mean(axis=0)

    def bw(g):
        gl = np.zeros_like(fl.data)
        gr = np.zeros_like(fr.data)
        for d in range(n_disp):
            gd = g[d, :, d:][None] / c
            gl[:, :, d:] += gd * fr.data[:, :, :w - d]
            gr[:, :, :w - d] += gd * fl.data[:, :, d:]
        return gl, gr

    return record_op(out, (fl, fr), bw)


def _shift_columns(t: Tensor, d: int) -> Tensor:
    """Shift data d columns toward +x with zero fill (reads from x - d)."""
    c, h, w = t.data.shape
    out = np.zeros_like(t.data)
    if d < w:
        out[:, :, d:] = t.data[:, :, :w - d]

    def bw(g):
        gt = np.zeros_like(t.data)
        if d < w:
            gt[:, :, :w - d] = g[:, :, d:]
        return (gt,)

    return record_op(out, (t,), bw)


def _concat0(a: Tensor, b: Tensor) -> Tensor:
    na = a.data.shape[0]
    out = np.concatenate([a.data, b.data], axis=0)
    return record_op(out, (a, b), lambda g: (g[:na], g[na:]))


def _stack0(tensors) -> Tensor:
    tensors = list(tensors)
    out = np.stack([t.data for t in tensors], axis=0)
    return record_op(out, tuple(tensors), lambda g: tuple(g[i] for i in range(len(tensors))))


def concat_volume(feat_l, feat_r, n_disp: int, net: StereoNet) -> Tensor:
    """Learned fusion without explicit matching: for each disparity the
    stacked (left, shifted-right) features pass through a per-pixel 1x1 MLP
    that emits one score; no similarity measure is hardwired."""
    if feat_l.data.shape != feat_r.data.shape:
        raise ShapeError(f"feature shapes differ: {feat_l.data.shape} vs {feat_r.data.shape}")
    _, _, w = feat_l.data.shape
    if n_disp >= w:
        raise ShapeError(f"n_disp={n_disp} must be < feature width {w}")
    p = net.params
    slope = net.config.leaky_slope
    slices = []
    for d in range(n_disp):
        stacked = _concat0(feat_l, _shift_columns(feat_r, d))
        hidden = leaky_relu(conv2d(stacked, p["fuse.hidden_weight"], p["fuse.hidden_bias"]),
                            slope)
        score = conv2d(hidden, p["fuse.out_weight"], p["fuse.out_bias"])
        slices.append(score)
    vol = _stack0(slices)  # [D,1,h,w]
    return record_op(vol.data[:, 0], (vol,), lambda g: (g[:, None],))


def build_cost_volume(feat_l, feat_r, d_max_f: int, mode: str, net: StereoNet = None) -> Tensor:
    """Dispatch on cost-volume mode; CONCAT needs the net for its fusion head."""
    if mode == COST_CORRELATION:
        return correlation_volume(feat_l, feat_r, d_max_f)
    if mode == COST_CONCAT:
        if net is None:
            raise ValueError("CONCAT mode needs the net holding the fusion head")
        return concat_volume(feat_l, feat_r, d_max_f, net)
    raise ValueError(f"unknown cost mode {mode!r}")


# ---------------------------------------------------------------------------
# adaptive per-slice aggregation
# ---------------------------------------------------------------------------

_ISA_TAPS = [(dy, dx) for dy in (-1, 0, 1) for dx in (-1, 0, 1)]


def isa_aggregate(cost, weights, offsets) -> Tensor:
    """Aggregate each disparity slice over 9 adaptively-offset taps.

    out(d,p) = sum_k w_k * cost(d, p + p_k + dp_k) where p_k spans the 3x3
    neighborhood and dp_k comes from offsets [18,h,w] (same layout as
    deform_conv2d). With zero offsets this reduces to a per-slice 3x3
    convolution with kernel w.
    """
    c = cost if isinstance(cost, Tensor) else Tensor(cost)
    wt = weights if isinstance(weights, Tensor) else Tensor(weights)
    off = offsets if isinstance(offsets, Tensor) else Tensor(offsets)
    n_disp, h, w = c.data.shape
    if wt.data.size != 9:
        raise ShapeError(f"isa weights must have 9 entries, got shape {wt.data.shape}")
    if off.data.shape != (18, h, w):
        raise ShapeError(f"isa offsets must be [18,{h},{w}], got {off.data.shape}")

    n = h * w
    gy, gx = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    base_y = gy.reshape(n).astype(np.float64)
    base_x = gx.reshape(n).astype(np.float64)
    wflat = wt.data.reshape(9)

    sampled = np.empty((9, n_disp, n))
    caches = []
    for t, (dy, dx) in enumerate(_ISA_TAPS):
        ys = base_y + dy + off.data[2 * t].reshape(n)
        xs = base_x + dx + off.data[2 * t + 1].reshape(n)
        vals, cache = _bilinear_gather(c.data, ys, xs)
        sampled[t] = vals
        caches.append(cache)
    # Same GEMM structure as conv2d so the zero-offset case reduces exactly.
    out = (wflat[None, :] @ sampled.reshape(9, n_disp * n)).reshape(n_disp, h, w)

    def bw(g):
        gn = g.reshape(n_disp, n)
        gw = np.einsum("dn,tdn->t", gn, sampled).reshape(wt.data.shape)
        gc = np.zeros_like(c.data)
        goff = np.empty_like(off.data)
        for t in range(9):
            gv = wflat[t] * gn
            gc += _bilinear_scatter_data(caches[t], gv)
            gys, gxs = _bilinear_pos_grad(caches[t], gv)
            goff[2 * t] = gys.reshape(h, w)
            goff[2 * t + 1] = gxs.reshape(h, w)
        return gc, gw, goff

    return record_op(out, (c, wt, off), bw)


# ---------------------------------------------------------------------------
# forward pass, loss, training
# ---------------------------------------------------------------------------

def encoder_features(net: StereoNet, image) -> list:
    """Per-layer activations of the shared encoder for one [3,H,W] image."""
    x = image if isinstance(image, Tensor) else Tensor(image)
    cfg = net.config
    feats = []
    for i, stride in enumerate(cfg.layer_strides()):
        w = net.params[f"enc{i}.weight"]
        b = net.params[f"enc{i}.bias"]
        if i in cfg.deformable_layer_indices:
            off = conv2d(x, net.params[f"enc{i}.offset_weight"],
                         net.params[f"enc{i}.offset_bias"], stride=stride, pad=1)
            y = deform_conv2d(x, w, b, off, stride=stride, pad=1)
        else:
            y = conv2d(x, w, b, stride=stride, pad=1)
        x = leaky_relu(y, cfg.leaky_slope)
        feats.append(x)
    return feats


def disparity_readout(volume: Tensor, downsample: int, out_h: int, out_w: int) -> Tensor:
    """Soft-argmin over cost slices, scaled to pixels and upsampled.

    d(p) = sum_d d * softmax_d(-volume(d,p)); adding a constant to every
    cost leaves the result unchanged (softmax shift invariance).
    """
    n_disp = volume.data.shape[0]
    prob = softmax(scalar_mul(volume, -1.0), axis=0)
    dvals = Tensor(np.arange(n_disp, dtype=np.float64).reshape(-1, 1, 1))
    dhat_feat = tsum(mul(prob, dvals), axis=0)
    return upsample_bilinear(scalar_mul(dhat_feat, float(downsample)), out_h, out_w)


def forward(net: StereoNet, left, right) -> Tensor:
    """Disparity map [H,W] in pixels at input resolution, in [0, d_max]."""
    cfg = net.config
    left = left if isinstance(left, Tensor) else Tensor(left)
    right = right if isinstance(right, Tensor) else Tensor(right)
    _, h, w = left.data.shape
    if h % cfg.downsample or w % cfg.downsample:
        raise ShapeError(f"input {h}x{w} not divisible by downsample {cfg.downsample}")
    feat_l = encoder_features(net, left)[-1]
    feat_r = encoder_features(net, right)[-1]
    vol = build_cost_volume(feat_l, feat_r, cfg.d_max_feature, cfg.cost_mode, net)
    if cfg.use_isa:
        off = conv2d(vol, net.params["isa.offset_weight"], net.params["isa.offset_bias"],
                     stride=1, pad=1)
        vol = isa_aggregate(vol, net.params["isa.weights"], off)
    logits = mul(vol, net.params["score.gain"])
    return disparity_readout(logits, cfg.downsample, h, w)


def disparity_loss(pred: Tensor, gt, spec: LossSpec) -> Tensor:
    """Masked smooth-L1 over pixels with valid ground truth (gt > 0)."""
    gt_arr = np.asarray(gt.data if isinstance(gt, Tensor) else gt, dtype=np.float64)
    mask = (gt_arr > 0).astype(np.float64)
    n_valid = mask.sum()
    if n_valid == 0:
        raise ValueError("no valid ground-truth pixels (gt > 0)")
    diff = record_op(pred.data - gt_arr, (pred,), lambda g: (g,))
    per_pixel = smooth_l1(diff, spec.beta)
    return scalar_mul(tsum(mul(per_pixel, Tensor(mask))), 1.0 / n_valid)


def predict(net: StereoNet, sample) -> np.ndarray:
    """Detached forward pass on a StereoSample."""
    return forward(net, sample.left, sample.right).data


def train(net: StereoNet, dataset, loss: LossSpec = None, epochs: int = 30,
          lr: float = 0.2, seed: int = 0) -> StereoNet:
    """Plain per-sample gradient descent with seeded shuffling.

    Mutates net.params in place, appends per-epoch mean losses to
    net.loss_trajectory and returns the net.
    """
    if not dataset:
        raise ValueError("dataset must be nonempty")
    spec = loss or LossSpec()
    rng = np.random.default_rng(seed)
    names = net.parameter_names()
    for _ in range(epochs):
        order = rng.permutation(len(dataset))
        losses = []
        for idx in order:
            sample = dataset[idx]
            net.zero_grads()
            with Tape():
                pred = forward(net, sample.left, sample.right)
                loss_t = disparity_loss(pred, sample.gt_disparity, spec)
                backward(loss_t)
            if lr != 0.0:
                for name in names:
                    p = net.params[name]
                    if p.grad is not None:
                        p.data = p.data - lr * p.grad
            losses.append(loss_t.item())
        net.loss_trajectory.append(float(np.mean(losses)))
    net.trained = True
    return net


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def save_net(path, net: StereoNet):
    items = net.config.to_items()
    items["trained"] = net.trained
    container.save_container(path, container.KIND_NET, items,
                             {k: v.data for k, v in net.params.items()})


def load_net(path) -> StereoNet:
    kind, items, params = container.load_container(path)
    if kind != container.KIND_NET:
        raise ValueError(f"{path} holds {kind!r}, expected a network checkpoint")
    cfg = StereoNetConfig.from_items(items)
    net = StereoNet(config=cfg,
                    params={k: Tensor(v, requires_grad=True) for k, v in params.items()})
    net.trained = str(items.get("trained", "false")).lower() in ("true", "1")
    return net
