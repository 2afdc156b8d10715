"""Input-convex feedforward networks and dataset normalization.

Two architectures are provided:

* :class:`FicnnParams` — a fully input-convex network (FICNN).  Layer
  weights on the convex path are non-negative; passthrough weights from
  the input are unconstrained unless the network must additionally be
  non-decreasing in its inputs (needed when the inputs are themselves
  convex functions of an underlying variable).
* :class:`PicnnParams` — a partially input-convex network (PICNN) that
  is convex in one input group and unrestricted in the other.

Both forwards are payload-generic: inputs may be plain arrays (with the
feature axis last), reverse-mode ``Var`` nodes, or forward-mode duals,
and the parameters themselves may be arrays or ``Var`` leaves during
training.  All convex-path activations are softplus, the non-convex
PICNN path uses tanh, and the multiplicative gates use softplus so that
their output is non-negative.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad

CKPT_SCHEMA = "gsmnet-ckpt-v1"
DATA_SCHEMA = "gsmnet-data-v1"


# ---------------------------------------------------------------------------
# architectures
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FicnnArch:
    """Shape of a FICNN: input width and per-layer output widths.

    The last width must be 1 (scalar output).  ``non_decreasing`` adds
    the non-negativity constraint on the passthrough weights, making
    the network non-decreasing (hence convex in any variable the inputs
    are convex functions of).
    """

    n_in: int
    widths: tuple[int, ...] = (10, 1)
    non_decreasing: bool = False

    def __post_init__(self):
        if self.n_in < 1 or any(w < 1 for w in self.widths):
            raise ValueError("network widths must be positive")
        if self.widths[-1] != 1:
            raise ValueError("final layer width must be 1")


@dataclass(frozen=True)
class PicnnArch:
    """Shape of a PICNN.

    ``u_widths`` are the convex-path layer widths (last must be 1);
    ``v_widths`` are the non-convex-path widths and must be one entry
    shorter, since the final convex layer consumes the last non-convex
    output.  ``non_decreasing_convex`` constrains the convex-input
    passthrough weights to be non-negative.
    """

    n_convex: int
    n_nonconvex: int
    u_widths: tuple[int, ...] = (10, 1)
    v_widths: tuple[int, ...] = (10,)
    non_decreasing_convex: bool = False

    def __post_init__(self):
        if min(self.n_convex, self.n_nonconvex) < 1:
            raise ValueError("input widths must be positive")
        if any(w < 1 for w in self.u_widths + self.v_widths):
            raise ValueError("network widths must be positive")
        if self.u_widths[-1] != 1:
            raise ValueError("final convex-path width must be 1")
        if len(self.v_widths) != len(self.u_widths) - 1:
            raise ValueError(
                "non-convex path must have one layer fewer than the convex path"
            )


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------


@dataclass
class FicnnLayer:
    wi: np.ndarray          # (width, n_in) passthrough from the input
    wu: np.ndarray | None   # (width, prev) from the previous layer; None on layer 1
    b: np.ndarray           # (width,)


@dataclass
class FicnnParams:
    arch: FicnnArch
    layers: list[FicnnLayer]


@dataclass
class PicnnVLayer:
    w: np.ndarray  # (width, prev) non-convex path
    b: np.ndarray


@dataclass
class PicnnULayer:
    """One convex-path layer.

    Layer 1 has no previous convex layer, so ``wu``/``gate_u_*`` are
    None there and the gates act on the raw non-convex input instead of
    a non-convex layer output.
    """

    wu: np.ndarray | None        # (width, prev_u), entries >= 0
    gate_u_w: np.ndarray | None  # (prev_u, n_v) gate for the previous layer
    gate_u_b: np.ndarray | None
    wi: np.ndarray               # (width, n_convex) convex-input passthrough
    gate_i_w: np.ndarray         # (n_convex, n_v) gate for the convex input
    gate_i_b: np.ndarray
    wv: np.ndarray               # (width, n_v) direct non-convex feed
    b: np.ndarray


@dataclass
class PicnnParams:
    arch: PicnnArch
    v_layers: list[PicnnVLayer]
    u_layers: list[PicnnULayer]


# ---------------------------------------------------------------------------
# forward evaluation
# ---------------------------------------------------------------------------


def _check_width(x, n, what):
    shape = np.shape(ad.val_of(x))
    if len(shape) < 1 or shape[-1] != n:
        raise ValueError(f"{what}: expected feature width {n}, got shape {shape}")


def ficnn_forward(p: FicnnParams, x):
    """Evaluate the network; returns a scalar payload (feature axis dropped)."""
    _check_width(x, p.arch.n_in, "ficnn input")
    u = None
    for layer in p.layers:
        z = ad.linear(x, layer.wi, layer.b)
        if layer.wu is not None:
            z = z + ad.linear(u, layer.wu)
        u = ad.softplus(z)
    return ad.take_last(u, 0)


def picnn_forward(p: PicnnParams, x_convex, x_nonconvex):
    """Evaluate the network; convex in ``x_convex`` for fixed ``x_nonconvex``."""
    _check_width(x_convex, p.arch.n_convex, "picnn convex input")
    _check_width(x_nonconvex, p.arch.n_nonconvex, "picnn non-convex input")
    u = None
    v_prev = x_nonconvex
    for k, layer in enumerate(p.u_layers):
        gate_i = ad.softplus(ad.linear(v_prev, layer.gate_i_w, layer.gate_i_b))
        z = ad.linear(x_convex * gate_i, layer.wi, layer.b)
        z = z + ad.linear(v_prev, layer.wv)
        if layer.wu is not None:
            gate_u = ad.softplus(ad.linear(v_prev, layer.gate_u_w, layer.gate_u_b))
            z = z + ad.linear(u * gate_u, layer.wu)
        u = ad.softplus(z)
        if k < len(p.v_layers):
            vl = p.v_layers[k]
            v_prev = ad.tanh(ad.linear(v_prev, vl.w, vl.b))
    return ad.take_last(u, 0)


# ---------------------------------------------------------------------------
# initialization and projection
# ---------------------------------------------------------------------------


def _glorot(rng, n_out, n_in, non_negative):
    g = np.sqrt(6.0 / (n_in + n_out))
    if non_negative:
        return rng.uniform(0.0, g, size=(n_out, n_in))
    return rng.uniform(-g, g, size=(n_out, n_in))


def init(arch, seed: int):
    """Draw parameters for ``arch``; deterministic per seed, feasible by
    construction (constrained weights sampled non-negative)."""
    rng = np.random.Generator(np.random.PCG64(seed))
    if isinstance(arch, FicnnArch):
        layers = []
        prev = None
        for width in arch.widths:
            wi = _glorot(rng, width, arch.n_in, arch.non_decreasing)
            wu = None if prev is None else _glorot(rng, width, prev, True)
            layers.append(FicnnLayer(wi=wi, wu=wu, b=np.zeros(width)))
            prev = width
        return FicnnParams(arch=arch, layers=layers)
    if isinstance(arch, PicnnArch):
        v_layers = []
        prev_v = arch.n_nonconvex
        for width in arch.v_widths:
            v_layers.append(
                PicnnVLayer(w=_glorot(rng, width, prev_v, False), b=np.zeros(width))
            )
            prev_v = width
        u_layers = []
        prev_u = None
        n_v = arch.n_nonconvex
        for width in arch.u_widths:
            first = prev_u is None
            u_layers.append(
                PicnnULayer(
                    wu=None if first else _glorot(rng, width, prev_u, True),
                    gate_u_w=None if first else _glorot(rng, prev_u, n_v, False),
                    gate_u_b=None if first else np.zeros(prev_u),
                    wi=_glorot(rng, width, arch.n_convex, arch.non_decreasing_convex),
                    gate_i_w=_glorot(rng, arch.n_convex, n_v, False),
                    gate_i_b=np.zeros(arch.n_convex),
                    wv=_glorot(rng, width, n_v, False),
                    b=np.zeros(width),
                )
            )
            prev_u = width
            if len(u_layers) <= len(arch.v_widths):
                n_v = arch.v_widths[len(u_layers) - 1]
        return PicnnParams(arch=arch, v_layers=v_layers, u_layers=u_layers)
    raise TypeError(f"unknown architecture type: {type(arch).__name__}")


def _clamp(w):
    return None if w is None else np.maximum(w, 0.0)


def project(p):
    """Clamp all constrained weight entries at zero; idempotent."""
    if isinstance(p, FicnnParams):
        nd = p.arch.non_decreasing
        layers = [
            dataclasses.replace(
                layer,
                wu=_clamp(layer.wu),
                wi=_clamp(layer.wi) if nd else layer.wi,
            )
            for layer in p.layers
        ]
        return dataclasses.replace(p, layers=layers)
    if isinstance(p, PicnnParams):
        nd = p.arch.non_decreasing_convex
        u_layers = [
            dataclasses.replace(
                layer,
                wu=_clamp(layer.wu),
                wi=_clamp(layer.wi) if nd else layer.wi,
            )
            for layer in p.u_layers
        ]
        return dataclasses.replace(p, u_layers=u_layers)
    raise TypeError(f"unknown parameter type: {type(p).__name__}")


def constrained_entries(p):
    """Views of the weight matrices that must stay non-negative."""
    out = []
    if isinstance(p, FicnnParams):
        for layer in p.layers:
            if layer.wu is not None:
                out.append(layer.wu)
            if p.arch.non_decreasing:
                out.append(layer.wi)
    elif isinstance(p, PicnnParams):
        for layer in p.u_layers:
            if layer.wu is not None:
                out.append(layer.wu)
            if p.arch.non_decreasing_convex:
                out.append(layer.wi)
    else:
        raise TypeError(f"unknown parameter type: {type(p).__name__}")
    return out


def is_feasible(p) -> bool:
    return all(np.all(w >= 0.0) for w in constrained_entries(p))


# ---------------------------------------------------------------------------
# normalization
# ---------------------------------------------------------------------------


@dataclass
class Normalizer:
    """Affine normalization constants fitted on a training set.

    ``s`` is the half-range and ``m`` the midpoint of each quantity over
    all steps and coordinates; the transform is ``(x - m) / s``.  The
    unobservable quantities reuse the ranges of observable ones: the
    internal variable inherits the strain scale, its rate the
    strain-rate scale, and the potentials the product of the strain and
    stress scales.  Tensor-valued inputs of the potentials are scaled
    without the offset so that the rest state maps to zero exactly.
    """

    s_eps: float
    m_eps: float
    s_sig: float
    m_sig: float
    s_epsdot: float
    m_epsdot: float
    s_t: float
    m_t: float
    s_dt: float
    m_dt: float

    FITTED = ("eps", "sig", "epsdot", "t", "dt")

    @property
    def s_q(self) -> float:
        return self.s_eps

    @property
    def s_qdot(self) -> float:
        return self.s_epsdot

    @property
    def s_psi(self) -> float:
        return self.s_eps * self.s_sig

    @property
    def m_psi(self) -> float:
        return self.s_eps * self.s_sig

    @property
    def s_phi(self) -> float:
        return self.s_epsdot * self.s_sig

    @property
    def m_phi(self) -> float:
        return self.s_epsdot * self.s_sig


def _range(name, values):
    lo = float(np.min(values))
    hi = float(np.max(values))
    # relative threshold: nominally-constant values (e.g. a fixed time step)
    # may differ by a few ulps after accumulation, yet are still degenerate
    if hi - lo <= 1e-12 * max(abs(hi), abs(lo)):
        raise ValueError(f"degenerate range for {name!r}: min {lo} ~ max {hi}")
    return (hi - lo) / 2.0, (hi + lo) / 2.0


def fit_normalizer(sequences) -> Normalizer:
    """Fit half-range/midpoint constants over a training set.

    ``sequences`` is any iterable of objects with ``t`` (shape (N+1,)),
    ``eps`` and ``sig`` (shape (N+1, 6)) arrays.  Strain rates are
    formed by backward differences.
    """
    seqs = list(sequences)
    if not seqs:
        raise ValueError("cannot fit a normalizer on an empty dataset")
    eps = np.concatenate([np.asarray(s.eps).ravel() for s in seqs])
    sig = np.concatenate([np.asarray(s.sig).ravel() for s in seqs])
    ts = [np.asarray(s.t, dtype=float) for s in seqs]
    dts = [np.diff(t) for t in ts]
    for s, dt in zip(seqs, dts):
        if dt.size == 0 or np.any(dt <= 0.0):
            raise ValueError("sequence times must be strictly increasing")
    epsdot = np.concatenate(
        [
            (np.diff(np.asarray(s.eps), axis=0) / dt[:, None]).ravel()
            for s, dt in zip(seqs, dts)
        ]
    )
    s_eps, m_eps = _range("eps", eps)
    s_sig, m_sig = _range("sig", sig)
    s_epsdot, m_epsdot = _range("epsdot", epsdot)
    s_t, m_t = _range("t", np.concatenate(ts))
    s_dt, m_dt = _range("dt", np.concatenate(dts))
    return Normalizer(
        s_eps=s_eps, m_eps=m_eps,
        s_sig=s_sig, m_sig=m_sig,
        s_epsdot=s_epsdot, m_epsdot=m_epsdot,
        s_t=s_t, m_t=m_t,
        s_dt=s_dt, m_dt=m_dt,
    )


# ---------------------------------------------------------------------------
# serialization (building blocks of the "gsmnet-ckpt-v1" checkpoint)
# ---------------------------------------------------------------------------


def _matrix(entry, shape, what):
    mat = np.asarray(entry, dtype=float)
    if mat.shape != shape:
        raise ValueError(f"{what}: expected shape {shape}, got {mat.shape}")
    return mat


def ficnn_to_payload(p: FicnnParams) -> dict:
    return {
        "kind": "ficnn",
        "n_in": p.arch.n_in,
        "widths": list(p.arch.widths),
        "non_decreasing": p.arch.non_decreasing,
        "activation": "softplus",
        "layers": [
            {
                "wi": layer.wi.tolist(),
                "wu": None if layer.wu is None else layer.wu.tolist(),
                "b": layer.b.tolist(),
            }
            for layer in p.layers
        ],
    }


def ficnn_from_payload(d: dict) -> FicnnParams:
    if d.get("kind") != "ficnn" or d.get("activation") != "softplus":
        raise ValueError("not a ficnn parameter payload")
    arch = FicnnArch(
        n_in=int(d["n_in"]),
        widths=tuple(int(w) for w in d["widths"]),
        non_decreasing=bool(d["non_decreasing"]),
    )
    layers = []
    prev = None
    for k, (entry, width) in enumerate(zip(d["layers"], arch.widths)):
        wu = entry["wu"]
        layers.append(
            FicnnLayer(
                wi=_matrix(entry["wi"], (width, arch.n_in), f"layer {k} wi"),
                wu=None if wu is None else _matrix(wu, (width, prev), f"layer {k} wu"),
                b=_matrix(entry["b"], (width,), f"layer {k} b"),
            )
        )
        prev = width
    p = FicnnParams(arch=arch, layers=layers)
    if not is_feasible(p):
        raise ValueError("checkpoint violates the non-negativity constraints")
    return p


def picnn_to_payload(p: PicnnParams) -> dict:
    def opt(w):
        return None if w is None else w.tolist()

    return {
        "kind": "picnn",
        "n_convex": p.arch.n_convex,
        "n_nonconvex": p.arch.n_nonconvex,
        "u_widths": list(p.arch.u_widths),
        "v_widths": list(p.arch.v_widths),
        "non_decreasing_convex": p.arch.non_decreasing_convex,
        "activation_convex": "softplus",
        "activation_nonconvex": "tanh",
        "activation_gates": "softplus",
        "v_layers": [{"w": l.w.tolist(), "b": l.b.tolist()} for l in p.v_layers],
        "u_layers": [
            {
                "wu": opt(l.wu),
                "gate_u_w": opt(l.gate_u_w),
                "gate_u_b": opt(l.gate_u_b),
                "wi": l.wi.tolist(),
                "gate_i_w": l.gate_i_w.tolist(),
                "gate_i_b": l.gate_i_b.tolist(),
                "wv": l.wv.tolist(),
                "b": l.b.tolist(),
            }
            for l in p.u_layers
        ],
    }


def picnn_from_payload(d: dict) -> PicnnParams:
    tags = (d.get("activation_convex"), d.get("activation_nonconvex"),
            d.get("activation_gates"))
    if d.get("kind") != "picnn" or tags != ("softplus", "tanh", "softplus"):
        raise ValueError("not a picnn parameter payload")
    arch = PicnnArch(
        n_convex=int(d["n_convex"]),
        n_nonconvex=int(d["n_nonconvex"]),
        u_widths=tuple(int(w) for w in d["u_widths"]),
        v_widths=tuple(int(w) for w in d["v_widths"]),
        non_decreasing_convex=bool(d["non_decreasing_convex"]),
    )
    v_layers = []
    prev_v = arch.n_nonconvex
    for k, (entry, width) in enumerate(zip(d["v_layers"], arch.v_widths)):
        v_layers.append(
            PicnnVLayer(
                w=_matrix(entry["w"], (width, prev_v), f"v-layer {k} w"),
                b=_matrix(entry["b"], (width,), f"v-layer {k} b"),
            )
        )
        prev_v = width
    u_layers = []
    prev_u = None
    n_v = arch.n_nonconvex
    for k, (entry, width) in enumerate(zip(d["u_layers"], arch.u_widths)):
        first = prev_u is None
        u_layers.append(
            PicnnULayer(
                wu=None if first else _matrix(
                    entry["wu"], (width, prev_u), f"u-layer {k} wu"),
                gate_u_w=None if first else _matrix(
                    entry["gate_u_w"], (prev_u, n_v), f"u-layer {k} gate_u_w"),
                gate_u_b=None if first else _matrix(
                    entry["gate_u_b"], (prev_u,), f"u-layer {k} gate_u_b"),
                wi=_matrix(entry["wi"], (width, arch.n_convex), f"u-layer {k} wi"),
                gate_i_w=_matrix(
                    entry["gate_i_w"], (arch.n_convex, n_v), f"u-layer {k} gate_i_w"),
                gate_i_b=_matrix(
                    entry["gate_i_b"], (arch.n_convex,), f"u-layer {k} gate_i_b"),
                wv=_matrix(entry["wv"], (width, n_v), f"u-layer {k} wv"),
                b=_matrix(entry["b"], (width,), f"u-layer {k} b"),
            )
        )
        prev_u = width
        if k < len(arch.v_widths):
            n_v = arch.v_widths[k]
    p = PicnnParams(arch=arch, v_layers=v_layers, u_layers=u_layers)
    if not is_feasible(p):
        raise ValueError("checkpoint violates the non-negativity constraints")
    return p


def normalizer_to_payload(n: Normalizer) -> dict:
    return {f.name: getattr(n, f.name) for f in dataclasses.fields(Normalizer)}


def normalizer_from_payload(d: dict) -> Normalizer:
    n = Normalizer(**{f.name: float(d[f.name]) for f in dataclasses.fields(Normalizer)})
    for name in Normalizer.FITTED:
        if getattr(n, f"s_{name}") <= 0.0:
            raise ValueError(f"normalizer scale for {name!r} must be positive")
    return n
