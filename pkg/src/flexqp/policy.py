"""Per-iteration parameter policies: fixed, residual-balancing adaptive,
and learned per-constraint network heads.

Learned policies evaluate up to three heads each iteration:

    pi_I   per inequality row, inputs  (s_i, z_I_i, w_s_i, y_I_i,
           ||zeta_dual||_inf, zeta_I_i, zbar_s_i, zbar_I_i, ztil_s_i,
           ztil_I_i), outputs (mu_I_i, sigma_s_i, rho_I_i)
    pi_E   per equality row, inputs (z_E_j, y_E_j, ||zeta_dual||_inf,
           zeta_E_j, zbar_E_j, ztil_E_j), outputs (mu_E_j, rho_E_j)
    pi_alpha  once, inputs are the nine residual inf-norms (relaxed dual,
           relaxed ineq, relaxed eq, ADMM dual s/I/E, ADMM primal s/I/E),
           output alpha

where zbar are ADMM dual residual entries and ztil ADMM primal ones.
Norm-like inputs pass through u -> log10(u + 1e-12); signed per-constraint
inputs through u -> sign(u) * log10(1 + |u| / 1e-6).  Every affine layer is
followed by a sigmoid; the final sigmoid output t is mapped by the head's
output transform: parameters via exp(log_lo + t*(log_hi - log_lo)) clamped
to [1e-6, 1e6] (so the zero network emits 1.0), alpha via 2*t (zero network
emits 1.0).  LSTM heads use the standard cell (sigmoid gates i/f/o, tanh
candidate, h = o * tanh(c), gate packing order i, f, g, o) with hidden size
32 followed by the affine head stack; hidden state persists across the
iterations of one solve and resets between solves.

Weight-file JSON (shared with the training component):

    {"version": 1,
     "kl_divergence": <optional float>,
     "input_transforms": {"pi_I": [<name> x 10], "pi_E": [...6], "pi_alpha": [...9]},
     "output_transforms": {"pi_I": {"kind": "exp_clamp", "log_lo": f, "log_hi": f},
                           "pi_E": {...}, "pi_alpha": {"kind": "scaled_sigmoid", "scale": 2.0}},
     "pi_I":  {"arch": "mlp", "layers": [{"rows": r, "cols": c, "w": [r*c row-major], "b": [r]}, ...]}
            | {"arch": "lstm", "lstm": {"hidden": H, "w_ih": {"rows": 4H, "cols": in, "w": [...]},
               "w_hh": {"rows": 4H, "cols": H, "w": [...]}, "b": [4H]}, "layers": [head stack]}
            | null,
     "pi_E": ..., "pi_alpha": ...}

Golden-vector files are JSON arrays of {"head", "inputs", "expected_outputs"}
rows; inputs are raw (pre-transform) and outputs post-transform, with LSTM
heads evaluated for a single step from the zero hidden state.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .solver import PARAM_MAX, PARAM_MIN, SolverParams, _inf, clamp_params

LOG_LO = float(np.log(PARAM_MIN))
LOG_HI = float(np.log(PARAM_MAX))
ALPHA_MARGIN = 1e-6

HEAD_INPUT_DIMS = {"pi_I": 10, "pi_E": 6, "pi_alpha": 9}
HEAD_OUTPUT_DIMS = {"pi_I": 3, "pi_E": 2, "pi_alpha": 1}

DEFAULT_INPUT_TRANSFORMS = {
    "pi_I": ["signed_log10"] * 4 + ["log10_shift"] + ["signed_log10"] * 5,
    "pi_E": ["signed_log10"] * 2 + ["log10_shift"] + ["signed_log10"] * 3,
    "pi_alpha": ["log10_shift"] * 9,
}
DEFAULT_OUTPUT_TRANSFORMS = {
    "pi_I": {"kind": "exp_clamp", "log_lo": LOG_LO, "log_hi": LOG_HI},
    "pi_E": {"kind": "exp_clamp", "log_lo": LOG_LO, "log_hi": LOG_HI},
    "pi_alpha": {"kind": "scaled_sigmoid", "scale": 2.0},
}


class PolicyError(RuntimeError):
    pass


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def log10_shift(u):
    return np.log10(np.asarray(u, dtype=np.float64) + 1e-12)


def signed_log10(u):
    u = np.asarray(u, dtype=np.float64)
    return np.sign(u) * np.log10(1.0 + np.abs(u) / 1e-6)


_TRANSFORMS = {"log10_shift": log10_shift, "signed_log10": signed_log10}


def apply_input_transforms(names, X):
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[None, :]
    if len(names) != X.shape[1]:
        raise PolicyError("transform list does not match input width")
    out = np.empty_like(X)
    for j, nm in enumerate(names):
        out[:, j] = _TRANSFORMS[nm](X[:, j])
    return out


def apply_output_transform(spec, t):
    kind = spec.get("kind")
    if kind == "exp_clamp":
        lo, hi = float(spec["log_lo"]), float(spec["log_hi"])
        return np.clip(np.exp(lo + t * (hi - lo)), PARAM_MIN, PARAM_MAX)
    if kind == "scaled_sigmoid":
        return float(spec.get("scale", 2.0)) * t
    raise PolicyError(f"unknown output transform {kind!r}")


# ---------------------------------------------------------------------------
# weights


@dataclass
class AffineLayer:
    W: np.ndarray
    b: np.ndarray


@dataclass
class LstmWeights:
    hidden: int
    W_ih: np.ndarray
    W_hh: np.ndarray
    b: np.ndarray


@dataclass
class HeadWeights:
    arch: str
    layers: list
    lstm: LstmWeights | None = None


@dataclass
class PolicyWeights:
    heads: dict
    input_transforms: dict = field(default_factory=lambda: dict(DEFAULT_INPUT_TRANSFORMS))
    output_transforms: dict = field(default_factory=lambda: dict(DEFAULT_OUTPUT_TRANSFORMS))
    version: int = 1
    kl_divergence: float | None = None


def _parse_matrix(doc, what):
    try:
        rows, cols = int(doc["rows"]), int(doc["cols"])
        w = np.asarray(doc["w"], dtype=np.float64)
    except (KeyError, TypeError) as e:
        raise PolicyError(f"malformed {what}: {e}")
    if w.size != rows * cols:
        raise PolicyError(f"{what}: expected {rows}x{cols} values, got {w.size}")
    return w.reshape(rows, cols)


def _parse_head(name, doc):
    if doc is None:
        return None
    arch = doc.get("arch")
    if arch not in ("mlp", "lstm"):
        raise PolicyError(f"{name}: unknown arch {arch!r}")
    layers = []
    for i, ld in enumerate(doc.get("layers", [])):
        W = _parse_matrix(ld, f"{name} layer {i}")
        b = np.asarray(ld.get("b", np.zeros(W.shape[0])), dtype=np.float64)
        if b.size != W.shape[0]:
            raise PolicyError(f"{name} layer {i}: bias length mismatch")
        layers.append(AffineLayer(W=W, b=b))
    lstm = None
    in_dim = HEAD_INPUT_DIMS[name]
    if arch == "lstm":
        ld = doc.get("lstm")
        if ld is None:
            raise PolicyError(f"{name}: lstm head without lstm weights")
        hidden = int(ld["hidden"])
        W_ih = _parse_matrix(ld["w_ih"], f"{name} w_ih")
        W_hh = _parse_matrix(ld["w_hh"], f"{name} w_hh")
        b = np.asarray(ld["b"], dtype=np.float64)
        if W_ih.shape != (4 * hidden, in_dim):
            raise PolicyError(f"{name}: w_ih must be {4 * hidden}x{in_dim}, "
                              f"got {W_ih.shape}")
        if W_hh.shape != (4 * hidden, hidden) or b.size != 4 * hidden:
            raise PolicyError(f"{name}: lstm recurrent shapes are wrong")
        lstm = LstmWeights(hidden=hidden, W_ih=W_ih, W_hh=W_hh, b=b)
        first_in = hidden
    else:
        first_in = in_dim
    if not layers:
        raise PolicyError(f"{name}: head has no affine layers")
    if layers[0].W.shape[1] != first_in:
        raise PolicyError(f"{name}: first layer expects {layers[0].W.shape[1]} "
                          f"inputs, head provides {first_in}")
    for prev, cur in zip(layers, layers[1:]):
        if cur.W.shape[1] != prev.W.shape[0]:
            raise PolicyError(f"{name}: layer width mismatch")
    if layers[-1].W.shape[0] != HEAD_OUTPUT_DIMS[name]:
        raise PolicyError(f"{name}: final layer must emit "
                          f"{HEAD_OUTPUT_DIMS[name]} outputs")
    return HeadWeights(arch=arch, layers=layers, lstm=lstm)


def load_weights(path) -> PolicyWeights:
    """Load and validate a weight file (see module docstring for format)."""
    with open(path) as f:
        text = f.read()
    return weights_from_json(text)


def weights_from_json(text: str) -> PolicyWeights:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise PolicyError(f"invalid weight JSON: {e}")
    heads = {nm: _parse_head(nm, doc.get(nm)) for nm in HEAD_INPUT_DIMS}
    if all(h is None for h in heads.values()):
        raise PolicyError("weight file defines no heads")
    it = doc.get("input_transforms", DEFAULT_INPUT_TRANSFORMS)
    ot = doc.get("output_transforms", DEFAULT_OUTPUT_TRANSFORMS)
    for nm in HEAD_INPUT_DIMS:
        names = it.get(nm, DEFAULT_INPUT_TRANSFORMS[nm])
        if len(names) != HEAD_INPUT_DIMS[nm] or \
                any(t not in _TRANSFORMS for t in names):
            raise PolicyError(f"{nm}: bad input transform list")
    return PolicyWeights(heads=heads,
                         input_transforms={nm: list(it.get(nm, DEFAULT_INPUT_TRANSFORMS[nm]))
                                           for nm in HEAD_INPUT_DIMS},
                         output_transforms={nm: dict(ot.get(nm, DEFAULT_OUTPUT_TRANSFORMS[nm]))
                                            for nm in HEAD_INPUT_DIMS},
                         version=int(doc.get("version", 1)),
                         kl_divergence=doc.get("kl_divergence"))


def weights_to_json(weights: PolicyWeights, indent=None) -> str:
    def mat(W):
        return {"rows": int(W.shape[0]), "cols": int(W.shape[1]),
                "w": [float(v) for v in W.ravel()]}

    def head(hw):
        if hw is None:
            return None
        doc = {"arch": hw.arch,
               "layers": [{**mat(l.W), "b": [float(v) for v in l.b]}
                          for l in hw.layers]}
        if hw.lstm is not None:
            doc["lstm"] = {"hidden": hw.lstm.hidden,
                           "w_ih": mat(hw.lstm.W_ih),
                           "w_hh": mat(hw.lstm.W_hh),
                           "b": [float(v) for v in hw.lstm.b]}
        return doc

    doc = {"version": weights.version,
           "input_transforms": weights.input_transforms,
           "output_transforms": weights.output_transforms}
    if weights.kl_divergence is not None:
        doc["kl_divergence"] = float(weights.kl_divergence)
    for nm in HEAD_INPUT_DIMS:
        doc[nm] = head(weights.heads.get(nm))
    return json.dumps(doc, indent=indent)


def save_weights(weights: PolicyWeights, path, indent=None):
    with open(path, "w") as f:
        f.write(weights_to_json(weights, indent=indent))


# ---------------------------------------------------------------------------
# forward passes


def forward_mlp(head: HeadWeights, X):
    """Sigmoid MLP stack; returns the final sigmoid output in (0, 1)."""
    T = np.asarray(X, dtype=np.float64)
    for layer in head.layers:
        T = _sigmoid(T @ layer.W.T + layer.b)
    return T


def lstm_step(lstm: LstmWeights, X, h, c):
    """One standard LSTM cell step for a batch of rows."""
    H = lstm.hidden
    gates = X @ lstm.W_ih.T + h @ lstm.W_hh.T + lstm.b
    i = _sigmoid(gates[:, 0:H])
    f = _sigmoid(gates[:, H:2 * H])
    g = np.tanh(gates[:, 2 * H:3 * H])
    o = _sigmoid(gates[:, 3 * H:4 * H])
    c_new = f * c + i * g
    h_new = o * np.tanh(c_new)
    return h_new, c_new


def forward_head(weights: PolicyWeights, name: str, raw_inputs,
                 hidden=None):
    """Full head evaluation: input transforms, network, output transform.

    Returns (outputs, hidden) where hidden is the updated (h, c) pair for
    LSTM heads (zero-initialized when None) and None for MLP heads.
    """
    head = weights.heads.get(name)
    if head is None:
        raise PolicyError(f"head {name} absent from weight file")
    X = apply_input_transforms(weights.input_transforms[name], raw_inputs)
    if head.arch == "lstm":
        B = X.shape[0]
        if hidden is None:
            hidden = (np.zeros((B, head.lstm.hidden)),
                      np.zeros((B, head.lstm.hidden)))
        h, c = lstm_step(head.lstm, X, hidden[0], hidden[1])
        T = forward_mlp(HeadWeights(arch="mlp", layers=head.layers), h)
        new_hidden = (h, c)
    else:
        T = forward_mlp(head, X)
        new_hidden = None
    if not np.all(np.isfinite(T)):
        raise PolicyError(f"policy head {name} produced non-finite output")
    out = apply_output_transform(weights.output_transforms[name], T)
    return out, new_hidden


# ---------------------------------------------------------------------------
# policies


class ParamPolicy:
    """Interface: reset(prob, params) then next_params(bundle, state) once
    per iteration, before the step.  Policies own at most per-solve state,
    so share one instance across concurrent solves never."""

    needs_residuals = True

    def reset(self, prob, params: SolverParams):
        raise NotImplementedError

    def next_params(self, bundle, state) -> SolverParams:
        raise NotImplementedError


class FixedPolicy(ParamPolicy):
    needs_residuals = False

    def __init__(self, params: SolverParams | None = None):
        self._given = params
        self._params = None

    def reset(self, prob, params):
        self._params = (self._given or params).copy()

    def next_params(self, bundle, state):
        return self._params


def fixed(params: SolverParams | None = None) -> FixedPolicy:
    """Policy that replays one parameter set forever."""
    return FixedPolicy(params)


@dataclass
class AdaptiveConfig:
    tau: float = 2.0
    ratio_trigger: float = 10.0
    adapt_every: int = 25


class AdaptivePolicy(ParamPolicy):
    """Residual balancing: every adapt_every iterations, scale the step
    parameters up when the ADMM primal residual dominates the dual one by
    ratio_trigger (down in the mirrored case), and double any mu entry
    whose dual iterate sits within 1% of it.  alpha stays fixed."""

    def __init__(self, cfg: AdaptiveConfig | None = None,
                 base: SolverParams | None = None):
        self.cfg = cfg or AdaptiveConfig()
        self._base = base
        self._params = None

    def reset(self, prob, params):
        self._params = (self._base or params).copy()

    def next_params(self, bundle, state):
        cfg = self.cfg
        if state.k > 0 and state.k % cfg.adapt_every == 0:
            p = self._params
            prim = bundle.admm_primal_inf()
            dual = bundle.admm_dual_inf()
            scale = 1.0
            if dual > 0.0 and prim / dual > cfg.ratio_trigger:
                scale = cfg.tau
            elif prim > 0.0 and dual / prim > cfg.ratio_trigger:
                scale = 1.0 / cfg.tau
            mu_I = p.mu_I.copy()
            mu_E = p.mu_E.copy()
            if mu_I.size:
                mu_I[np.abs(state.y_I) >= 0.99 * mu_I] *= 2.0
            if mu_E.size:
                mu_E[np.abs(state.y_E) >= 0.99 * mu_E] *= 2.0
            self._params = clamp_params(SolverParams(
                mu_I=mu_I, mu_E=mu_E,
                sigma_s=p.sigma_s * scale,
                rho_I=p.rho_I * scale, rho_E=p.rho_E * scale,
                sigma_x=p.sigma_x, alpha=p.alpha))
        return self._params


def adaptive(cfg: AdaptiveConfig | None = None,
             base: SolverParams | None = None) -> AdaptivePolicy:
    return AdaptivePolicy(cfg, base)


class LearnedPolicy(ParamPolicy):
    """Evaluates the weight file's heads each iteration.  Heads absent from
    the file leave the corresponding parameters at their initial values."""

    def __init__(self, weights: PolicyWeights):
        self.weights = weights
        self._params = None
        self._hidden = {}

    def reset(self, prob, params):
        self._params = params.copy()
        self._hidden = {"pi_I": None, "pi_E": None, "pi_alpha": None}

    def _inputs_I(self, bundle, state):
        m = state.s.size
        nd = np.full(m, _inf(bundle.zeta_dual))
        return np.stack([state.s, state.z_I, state.w_s, state.y_I, nd,
                         bundle.zeta_I, bundle.dual_s, bundle.dual_I,
                         bundle.prim_s, bundle.prim_I], axis=1)

    def _inputs_E(self, bundle, state):
        p = state.z_E.size
        nd = np.full(p, _inf(bundle.zeta_dual))
        return np.stack([state.z_E, state.y_E, nd, bundle.zeta_E,
                         bundle.dual_E, bundle.prim_E], axis=1)

    def _inputs_alpha(self, bundle):
        return np.array([[_inf(bundle.zeta_dual), _inf(bundle.zeta_I),
                          _inf(bundle.zeta_E), _inf(bundle.dual_s),
                          _inf(bundle.dual_I), _inf(bundle.dual_E),
                          _inf(bundle.prim_s), _inf(bundle.prim_I),
                          _inf(bundle.prim_E)]])

    def next_params(self, bundle, state):
        w = self.weights
        p = self._params
        mu_I, sig_s, rho_I = p.mu_I, p.sigma_s, p.rho_I
        mu_E, rho_E = p.mu_E, p.rho_E
        alpha = p.alpha
        if w.heads.get("pi_I") is not None and state.s.size:
            out, self._hidden["pi_I"] = forward_head(
                w, "pi_I", self._inputs_I(bundle, state), self._hidden["pi_I"])
            mu_I, sig_s, rho_I = out[:, 0], out[:, 1], out[:, 2]
        if w.heads.get("pi_E") is not None and state.z_E.size:
            out, self._hidden["pi_E"] = forward_head(
                w, "pi_E", self._inputs_E(bundle, state), self._hidden["pi_E"])
            mu_E, rho_E = out[:, 0], out[:, 1]
        if w.heads.get("pi_alpha") is not None:
            out, self._hidden["pi_alpha"] = forward_head(
                w, "pi_alpha", self._inputs_alpha(bundle), self._hidden["pi_alpha"])
            alpha = float(np.clip(out[0, 0], ALPHA_MARGIN, 2.0 - ALPHA_MARGIN))
        self._params = clamp_params(SolverParams(
            mu_I=mu_I, mu_E=mu_E, sigma_s=sig_s, rho_I=rho_I, rho_E=rho_E,
            sigma_x=p.sigma_x, alpha=alpha))
        return self._params


def learned(weights_or_path) -> LearnedPolicy:
    if isinstance(weights_or_path, PolicyWeights):
        return LearnedPolicy(weights_or_path)
    return LearnedPolicy(load_weights(weights_or_path))
