"""Experiment configuration: JSON schema, validation, and figure presets."""

import json
from dataclasses import dataclass, field, asdict

from .errors import ParseError, ValidationError

EXPERIMENTS = ("train", "sweep", "lowrank", "transfer", "theory", "gradcheck")
TASK_KINDS = ("affine", "relu", "cosine", "hills")
COVARIATE_KINDS = ("uniform", "anisotropic", "shaped")
ESTIMATORS = ("softmax", "linear")
LOWRANK_KINDS = ("lowrank_affine", "lowrank_quad", "lowrank_cos", "lowrank_lin")


@dataclass
class ExperimentConfig:
    """Flat, JSON-serializable description of one experiment.

    Ablation lists (L_values, sigma_values, n_values) expand as a union:
    each varies one knob while the others sit at their base values, matching
    how the reference figures were produced.
    """

    experiment: str = "train"
    preset: str | None = None
    out_dir: str | None = None
    seeds: list = field(default_factory=lambda: [0, 1, 2, 3, 4])

    # problem geometry
    d: int = 5
    k: int = 2
    n: int = 20
    num_queries: int | None = None          # None -> floor(sqrt(n))
    sigma: float = 0.01

    # task distribution(s)
    task_kinds: list = field(default_factory=lambda: ["relu"])
    L: float = 1.0
    nu: float = 1.5
    covariates: list = field(default_factory=lambda: ["uniform"])
    c_u: float = 1.0
    c_v: float = 1.0

    # ablations (train)
    L_values: list | None = None
    sigma_values: list | None = None
    n_values: list | None = None

    # optimization
    estimators: list = field(default_factory=lambda: ["softmax"])
    mode: str = "tied"
    lr: float = 0.1
    lr_linear: float | None = None          # tuned separately for linear attention
    decay: float = 0.999
    iterations: int = 3000
    eval_every: int = 300
    eval_tasks: int = 50
    final_eval_tasks: int = 500

    # bandwidth sweep
    w_min: float = 0.5
    w_max: float = 128.0
    w_points: int = 25
    contexts_per_point: int = 2000

    # low-rank study
    lowrank_kinds: list = field(default_factory=lambda: ["lowrank_affine", "lowrank_quad", "lowrank_cos"])

    # transfer study: list of {"kind": ..., "L": ...} pretraining classes
    pretrain_classes: list | None = None
    eval_class: dict | None = None

    def to_dict(self):
        return asdict(self)


PRESETS = {
    # spectral norm of M during pretraining, ablated over the task scale L
    "fig-L": dict(
        experiment="train", d=5, n=20, sigma=0.01,
        task_kinds=["relu", "cosine"], covariates=["uniform", "anisotropic"],
        L_values=[0.5, 2.0], lr=0.1, decay=0.999, iterations=3000,
        eval_every=300, eval_tasks=50,
    ),
    # same, ablated over the noise level and the context length
    "fig-sigma-n": dict(
        experiment="train", d=5, n=20, sigma=0.01, L=1.0,
        task_kinds=["relu"], covariates=["uniform"],
        sigma_values=[0.01, 0.5], n_values=[10, 80],
        lr=0.01, decay=0.999, iterations=3000, eval_every=300, eval_tasks=50,
    ),
    # pretrain on one class, evaluate on another with matched or mismatched scale
    "fig-transfer": dict(
        experiment="transfer", d=5, n=200, sigma=0.01,
        pretrain_classes=[
            {"kind": "affine", "L": 1.0},
            {"kind": "cosine", "L": 1.0},
            {"kind": "cosine", "L": 10.0},
            {"kind": "cosine", "L": 0.1},
        ],
        eval_class={"kind": "cosine", "L": 1.0},
        lr=0.1, decay=0.999, iterations=3000, eval_every=300, eval_tasks=20,
        final_eval_tasks=500,
    ),
    # subspace recovery on shaped covariates, softmax vs linear attention;
    # single-query contexts and a small constant lr keep the weak
    # subspace-recovery gradient visible over the long horizon
    "fig-lowrank": dict(
        experiment="lowrank", d=10, k=2, n=50, sigma=0.01, num_queries=1,
        covariates=["shaped"], estimators=["softmax", "linear"],
        lowrank_kinds=["lowrank_affine", "lowrank_quad", "lowrank_cos"],
        lr=0.001, lr_linear=0.01, decay=1.0, iterations=32000,
        eval_every=4000, eval_tasks=50, final_eval_tasks=500,
    ),
    # bandwidth sweeps over n (for the w* exponent) plus the softmax/linear gap
    "fig-scaling": dict(
        experiment="sweep", d=5, sigma=0.05, task_kinds=["relu"], L=1.0,
        covariates=["uniform"], n_values=[16, 64, 256, 1024],
        w_min=0.5, w_max=128.0, w_points=25, contexts_per_point=2000,
        # train side (softmax-vs-linear gap at matched settings)
        n=200, estimators=["softmax", "linear"], lr=0.1, lr_linear=0.01,
        iterations=3000, eval_every=300, eval_tasks=50, final_eval_tasks=500,
    ),
    # theory bound suite defaults
    "theory": dict(experiment="theory", seeds=[0]),
    "gradcheck": dict(experiment="gradcheck", seeds=[0]),
}


_INT_KEYS = {"d": 1, "k": 1, "n": 1, "iterations": 0, "eval_every": 1, "eval_tasks": 1,
             "final_eval_tasks": 1, "w_points": 2, "contexts_per_point": 100}
_POS_FLOAT_KEYS = {"L": 0.0, "lr": 0.0, "decay": 0.0, "w_min": None, "w_max": None}


def _validate(cfg):
    if cfg.experiment not in EXPERIMENTS:
        raise ValidationError("experiment", f"must be one of {EXPERIMENTS}")
    if not cfg.seeds:
        raise ValidationError("seeds", "must be nonempty")
    for key, lo in _INT_KEYS.items():
        val = getattr(cfg, key)
        if not isinstance(val, int) or val < lo:
            raise ValidationError(key, f"must be an integer >= {lo}")
    if cfg.sigma < 0:
        raise ValidationError("sigma", "must be nonnegative")
    if cfg.lr <= 0:
        raise ValidationError("lr", "must be positive")
    if cfg.lr_linear is not None and cfg.lr_linear <= 0:
        raise ValidationError("lr_linear", "must be positive")
    if not 0 < cfg.decay <= 1:
        raise ValidationError("decay", "must be in (0, 1]")
    if cfg.num_queries is not None and cfg.num_queries < 1:
        raise ValidationError("num_queries", "must be >= 1 when given")
    if cfg.k >= cfg.d:
        raise ValidationError("k", "must be smaller than d")
    if cfg.w_min >= cfg.w_max:
        raise ValidationError("w_min", "must be below w_max")
    if cfg.mode not in ("tied", "direct"):
        raise ValidationError("mode", "must be 'tied' or 'direct'")
    for kind in cfg.task_kinds:
        if kind not in TASK_KINDS:
            raise ValidationError("task_kinds", f"unknown task kind {kind!r}")
    for cov in cfg.covariates:
        if cov not in COVARIATE_KINDS:
            raise ValidationError("covariates", f"unknown covariate kind {cov!r}")
    for est in cfg.estimators:
        if est not in ESTIMATORS:
            raise ValidationError("estimators", f"unknown estimator {est!r}")
    for kind in cfg.lowrank_kinds:
        if kind not in LOWRANK_KINDS:
            raise ValidationError("lowrank_kinds", f"unknown low-rank kind {kind!r}")
    for name in ("L_values", "sigma_values", "n_values"):
        vals = getattr(cfg, name)
        if vals is not None and len(vals) == 0:
            raise ValidationError(name, "must be nonempty when given")
    if cfg.sigma_values is not None and any(s < 0 for s in cfg.sigma_values):
        raise ValidationError("sigma_values", "entries must be nonnegative")
    if cfg.n_values is not None and any(int(n) < 1 or int(n) != n for n in cfg.n_values):
        raise ValidationError("n_values", "entries must be positive integers")
    if cfg.pretrain_classes is not None:
        for spec in cfg.pretrain_classes:
            if spec.get("kind") not in TASK_KINDS:
                raise ValidationError("pretrain_classes", f"unknown task kind {spec.get('kind')!r}")
    if cfg.eval_class is not None and cfg.eval_class.get("kind") not in TASK_KINDS:
        raise ValidationError("eval_class", "unknown task kind")
    if any(int(s) != s for s in cfg.seeds):
        raise ValidationError("seeds", "entries must be integers")
    return cfg


def build_config(data):
    """Construct a validated config from a dict (preset values first,
    explicit keys on top). Unknown keys are rejected by name."""
    if not isinstance(data, dict):
        raise ParseError("config root must be a JSON object")
    known = set(ExperimentConfig.__dataclass_fields__)
    merged = {}
    preset = data.get("preset")
    if preset is not None:
        if preset not in PRESETS:
            raise ValidationError("preset", f"unknown preset {preset!r}; "
                                            f"choose from {sorted(PRESETS)}")
        merged.update(PRESETS[preset])
        merged["preset"] = preset
    for key, value in data.items():
        if key not in known:
            raise ValidationError(key, "unknown config key")
        if key != "preset":
            merged[key] = value
    return _validate(ExperimentConfig(**merged))


def from_preset(name, **overrides):
    return build_config({"preset": name, **overrides})


def load_config(path):
    """Load and validate a JSON config file."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            data = json.load(fh)
    except OSError as exc:
        raise ParseError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ParseError(f"malformed JSON in {path}: {exc}") from exc
    return build_config(data)
