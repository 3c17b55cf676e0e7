"""Joint training of the two branches through the fusion layer, and evaluation.

One step on a case:

1. standardize and augment the case, run branch A on volume A and branch B
   on volume B;
2. fuse the two probability maps voxelwise with Dempster's rule;
3. score the branch maps with Dice and the fused map with squared error,
   all against the modality-A mask;
4. send the fused-map gradient back through the fusion layer, add it to
   each branch's own Dice gradient, backpropagate, and step the optimizer.

Every random choice (case order, augmentation) is derived from
``(seed, epoch, case index)``, so an interrupted run resumed from its last
checkpoint continues exactly as the uninterrupted one would have.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from ..errors import DomainError, NumericalError, UsageError
from ..fusion import baseline_combine, dempster_fuse, dempster_fuse_backward
from ..losses import LossReport, LossWeights, Metrics, metrics, multitask_loss
from ..nn.model import Model, ModelConfig, init_model, load_checkpoint, read_blobs, \
    save_checkpoint, write_blobs
from ..synth import CaseTriple, ManifestEntry, read_manifest
from ..volume import standardize
from .augment import AugmentConfig, augment
from .optim import make_optimizer

log = logging.getLogger(__name__)

METHODS = ("A-only", "B-only", "fused", "average", "vote")
HISTORY_FIELDS = ("epoch", "loss_all", "loss_pet", "loss_ct", "loss_f", "val_loss_all")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    lr: float = 1e-3
    optimizer: str = "adam"
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    batch_size: int = 1
    seed: int = 0
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    weights: LossWeights = field(default_factory=LossWeights)
    model: ModelConfig = field(default_factory=ModelConfig)
    warmup_epochs: int = 0
    patience: int = 10
    threshold: float = 0.5
    # initial foreground probability of branch B; branch A uses model.output_prior.
    # 0.5 is the neutral Bayesian mass, so the fused map starts close to
    # branch A and the class prior is not counted twice
    output_prior_b: float = 0.5

    def __post_init__(self):
        if not self.lr >= 0 or not math.isfinite(self.lr):
            raise DomainError(f"learning rate must be finite and non-negative, got {self.lr}")
        if self.epochs < 1 or self.batch_size < 1:
            raise DomainError("epochs and batch_size must be at least 1")
        if self.optimizer not in ("adam", "sgd"):
            raise UsageError(f"unknown optimizer {self.optimizer!r}")
        if not (0.0 < self.output_prior_b < 1.0):
            raise DomainError(f"output_prior_b must lie in (0, 1), got {self.output_prior_b}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        try:
            if "augment" in d:
                aug = dict(d["augment"])
                if "scale_range" in aug:
                    aug["scale_range"] = tuple(aug["scale_range"])
                d["augment"] = AugmentConfig(**aug)
            if "weights" in d:
                d["weights"] = LossWeights(**d["weights"])
            if "model" in d:
                d["model"] = ModelConfig(**d["model"])
            if "betas" in d:
                d["betas"] = tuple(d["betas"])
            return cls(**d)
        except TypeError as exc:
            raise UsageError(f"bad training config: {exc}") from exc


@dataclass
class EpochRecord:
    epoch: int
    loss_all: float
    loss_pet: float
    loss_ct: float
    loss_f: float
    val_loss_all: float


@dataclass
class MethodSummary:
    method: str
    per_case: list[Metrics]

    def _stat(self, attr):
        vals = np.array([getattr(m, attr) for m in self.per_case], dtype=np.float64)
        return float(vals.mean()), float(vals.std())

    @property
    def dice(self):
        return self._stat("dice")

    @property
    def precision(self):
        return self._stat("precision")

    @property
    def recall(self):
        return self._stat("recall")


@dataclass
class MetricsTable:
    split: str
    case_ids: list[str]
    rows: dict[str, MethodSummary]
    threshold: float = 0.5

    def row(self, method: str) -> MethodSummary:
        return self.rows[method]

    def format(self) -> str:
        lines = [f"{'method':<8}  {'dice':>15}  {'precision':>15}  {'recall':>15}"]
        for name, r in self.rows.items():
            cells = ["{:.4f} ± {:.4f}".format(*getattr(r, a)) for a in ("dice", "precision", "recall")]
            lines.append(f"{name:<8}  " + "  ".join(f"{c:>15}" for c in cells))
        return "\n".join(lines)

    def to_csv(self) -> str:
        out = ["method,dice_mean,dice_std,precision_mean,precision_std,recall_mean,recall_std"]
        for name, r in self.rows.items():
            vals = [*r.dice, *r.precision, *r.recall]
            out.append(name + "," + ",".join(f"{v:.6f}" for v in vals))
        return "\n".join(out) + "\n"

    def key_values(self) -> str:
        lines = [f"split={self.split}", f"threshold={self.threshold}", f"cases={len(self.case_ids)}"]
        for name, r in self.rows.items():
            key = name.lower().replace("-", "_")
            for attr in ("dice", "precision", "recall"):
                mean, std = getattr(r, attr)
                lines.append(f"{key}.{attr}_mean={mean:.6f}")
                lines.append(f"{key}.{attr}_std={std:.6f}")
        return "\n".join(lines) + "\n"


@dataclass
class TrainHistory:
    epochs: list[EpochRecord] = field(default_factory=list)
    test: MetricsTable | None = None
    best_epoch: int = 0
    stopped_early: bool = False

    def to_csv(self) -> str:
        lines = [",".join(HISTORY_FIELDS)]
        for r in self.epochs:
            vals = [repr(float(getattr(r, f))) for f in HISTORY_FIELDS[1:]]
            lines.append(f"{r.epoch}," + ",".join(vals))
        return "\n".join(lines) + "\n"


@dataclass
class Prepared:
    case_id: str
    case: CaseTriple


def prepare_case(case: CaseTriple) -> CaseTriple:
    return CaseTriple(standardize(case.vol_a), standardize(case.vol_b), case.mask, case.lesions)


def load_split(entries: list[ManifestEntry], split: str) -> list[Prepared]:
    return [Prepared(e.case_id, prepare_case(e.load())) for e in entries if e.split == split]


def case_loss_and_grads(model_a: Model, model_b: Model, x_a, x_b, mask,
                        weights: LossWeights | None = None, need_grads: bool = True):
    """Loss report and parameter gradients for one case through the full graph.

    Returns ``(report, grads_a, grads_b)``; gradients are ``None`` when
    ``need_grads`` is false. ``grads_*["input"]`` holds the gradient with
    respect to the branch inputs.
    """
    x_a, x_b, mask = np.asarray(x_a), np.asarray(x_b), np.asarray(mask)
    prob_a, cache_a = model_a.forward(x_a[None, None])
    prob_b, cache_b = model_b.forward(x_b[None, None])
    p, q = prob_a[0, 0], prob_b[0, 0]
    for name, prob in (("branch A", p), ("branch B", q)):
        if not np.isfinite(prob).all():
            raise NumericalError(f"{name} produced non-finite probabilities (loss_pet/loss_ct undefined)")
    fused, _ = dempster_fuse(p, q)
    report = multitask_loss(p, q, fused, mask.astype(p.dtype), weights)
    if not need_grads:
        return report, None, None
    dfa, dfb = dempster_fuse_backward(p, q, report.grad_f)
    g_a = (report.grad_pet + dfa)[None, None]
    g_b = (report.grad_ct + dfb)[None, None]
    return report, model_a.backward(cache_a, g_a), model_b.backward(cache_b, g_b)


def init_branches(cfg: TrainConfig) -> tuple[Model, Model]:
    """Fresh branch A (seed ``cfg.seed``) and branch B (seed ``cfg.seed + 1``)."""
    model_b_cfg = replace(cfg.model, output_prior=cfg.output_prior_b)
    return init_model(cfg.model, cfg.seed), init_model(model_b_cfg, cfg.seed + 1)


def _check_finite(report: LossReport, case_id: str) -> None:
    for name in ("loss_pet", "loss_ct", "loss_f", "loss_all"):
        if not math.isfinite(getattr(report, name)):
            raise NumericalError(f"non-finite {name} on {case_id}: {getattr(report, name)!r}")


def _epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch, 0x5EED]).permutation(n)


def _aug_seed(seed: int, epoch: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, epoch, index]).generate_state(1)[0])


def mean_loss(model_a: Model, model_b: Model, cases: list[Prepared],
              weights: LossWeights) -> tuple[float, float, float, float]:
    acc = np.zeros(4)
    for c in cases:
        r, _, _ = case_loss_and_grads(model_a, model_b, c.case.vol_a.data, c.case.vol_b.data,
                                      c.case.mask.data, weights, need_grads=False)
        _check_finite(r, c.case_id)
        acc += (r.loss_all, r.loss_pet, r.loss_ct, r.loss_f)
    return tuple(float(v) for v in acc / max(len(cases), 1))


def _fingerprint(entries: list[ManifestEntry]) -> list[str]:
    return [f"{e.case_id}:{e.split}" for e in entries]


class _Run:
    """Mutable training state; everything needed to resume lives in checkpoints."""

    def __init__(self, cfg: TrainConfig, out_dir: Path | None):
        self.cfg = cfg
        self.out = out_dir
        self.model_a, self.model_b = init_branches(cfg)
        self.opt_a = make_optimizer(cfg.optimizer, cfg.lr, cfg.betas, cfg.eps)
        self.opt_b = make_optimizer(cfg.optimizer, cfg.lr, cfg.betas, cfg.eps)
        self.history = TrainHistory()
        self.best_val = math.inf
        self.bad_epochs = 0
        self.best = (self.model_a.copy(), self.model_b.copy())

    def path(self, name: str) -> Path:
        return self.out / name

    def save(self, fingerprint) -> None:
        if self.out is None:
            return
        save_checkpoint(self.model_a, self.path("last_a.ckpt"))
        save_checkpoint(self.model_b, self.path("last_b.ckpt"))
        meta_a, arr_a = self.opt_a.state()
        meta_b, arr_b = self.opt_b.state()
        arrays = {f"A:{k}": v for k, v in arr_a.items()}
        arrays.update({f"B:{k}": v for k, v in arr_b.items()})
        meta = {
            "kind": "trainer",
            "config": self.cfg.to_dict(),
            "manifest": fingerprint,
            "optim_a": meta_a,
            "optim_b": meta_b,
            "best_val": self.best_val if math.isfinite(self.best_val) else None,
            "bad_epochs": self.bad_epochs,
            "best_epoch": self.history.best_epoch,
            "history": [asdict(r) for r in self.history.epochs],
        }
        write_blobs(self.path("trainer_state.ckpt"), meta, arrays)
        self.path("history.csv").write_text(self.history.to_csv())

    def save_best(self) -> None:
        self.best = (self.model_a.copy(), self.model_b.copy())
        if self.out is not None:
            save_checkpoint(self.model_a, self.path("best_a.ckpt"))
            save_checkpoint(self.model_b, self.path("best_b.ckpt"))

    def restore(self, fingerprint) -> None:
        meta, arrays = read_blobs(self.path("trainer_state.ckpt"))
        saved = dict(meta.get("config") or {})
        current = json.loads(json.dumps(self.cfg.to_dict()))
        # the epoch budget may grow between sessions; everything else must match
        saved.pop("epochs", None)
        current.pop("epochs", None)
        if saved != current:
            raise UsageError("cannot resume: training config differs from the checkpoint")
        if meta.get("manifest") != fingerprint:
            raise UsageError("cannot resume: manifest differs from the checkpoint")
        self.model_a = load_checkpoint(self.path("last_a.ckpt"))
        self.model_b = load_checkpoint(self.path("last_b.ckpt"))
        self.opt_a.load_state(meta["optim_a"], {k[2:]: v for k, v in arrays.items() if k.startswith("A:")})
        self.opt_b.load_state(meta["optim_b"], {k[2:]: v for k, v in arrays.items() if k.startswith("B:")})
        self.best_val = math.inf if meta["best_val"] is None else meta["best_val"]
        self.bad_epochs = meta["bad_epochs"]
        self.history.epochs = [EpochRecord(**r) for r in meta["history"]]
        self.history.best_epoch = meta["best_epoch"]
        best_a, best_b = self.path("best_a.ckpt"), self.path("best_b.ckpt")
        if best_a.exists() and best_b.exists():
            self.best = (load_checkpoint(best_a), load_checkpoint(best_b))
        else:
            self.best = (self.model_a.copy(), self.model_b.copy())

    def step(self, batch_grads) -> None:
        n = len(batch_grads)
        for model, opt, side in ((self.model_a, self.opt_a, 0), (self.model_b, self.opt_b, 1)):
            total = {k: np.zeros_like(v) for k, v in model.params.items()}
            # fixed summation order over the batch
            for grads in batch_grads:
                for k in total:
                    total[k] += grads[side][k]
            if n > 1:
                for k in total:
                    total[k] /= n
            opt.step(model.params, total)
            model.touch()

    def run_epoch(self, epoch: int, train_cases: list[Prepared]) -> tuple[float, float, float, float]:
        cfg = self.cfg
        weights = cfg.weights if epoch > cfg.warmup_epochs else replace(cfg.weights, w_f=0.0)
        acc = np.zeros(4)
        pending = []
        for idx in _epoch_order(cfg.seed, epoch, len(train_cases)):
            item = train_cases[idx]
            case = augment(item.case, _aug_seed(cfg.seed, epoch, int(idx)), cfg.augment)
            report, ga, gb = case_loss_and_grads(self.model_a, self.model_b, case.vol_a.data,
                                                 case.vol_b.data, case.mask.data, weights)
            _check_finite(report, item.case_id)
            acc += (report.loss_all, report.loss_pet, report.loss_ct, report.loss_f)
            pending.append((ga, gb))
            if len(pending) == cfg.batch_size:
                self.step(pending)
                pending = []
        if pending:
            self.step(pending)
        return tuple(float(v) for v in acc / len(train_cases))


def train(cfg: TrainConfig, manifest, out_dir=None, resume: bool = False,
          evaluate_test: bool = True) -> tuple[Model, Model, TrainHistory]:
    """Train both branches; returns the best-validation models and the history.

    With ``out_dir`` set, the last and best checkpoints, the trainer state
    and ``history.csv`` are rewritten after every epoch. Without a
    validation split the final models count as best.
    """
    entries = manifest if isinstance(manifest, list) else read_manifest(manifest)
    train_cases = load_split(entries, "train")
    if not train_cases:
        raise UsageError("manifest has no training cases")
    val_cases = load_split(entries, "val")
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    run = _Run(cfg, out)
    fingerprint = _fingerprint(entries)
    if resume:
        if out is None:
            raise UsageError("resume needs an output directory")
        run.restore(fingerprint)
    elif out is not None:
        run.save_best()

    start = len(run.history.epochs) + 1
    for epoch in range(start, cfg.epochs + 1):
        if run.bad_epochs >= cfg.patience:
            break
        loss_all, l_pet, l_ct, l_f = run.run_epoch(epoch, train_cases)
        if val_cases:
            val_all = mean_loss(run.model_a, run.model_b, val_cases, cfg.weights)[0]
        else:
            val_all = math.nan
        run.history.epochs.append(EpochRecord(epoch, loss_all, l_pet, l_ct, l_f, val_all))
        score = val_all if val_cases else loss_all
        if score < run.best_val:
            run.best_val = score
            run.bad_epochs = 0
            run.history.best_epoch = epoch
            run.save_best()
        else:
            run.bad_epochs += 1
        log.info("epoch %d loss_all=%.5f pet=%.4f ct=%.4f f=%.3f val=%.5f",
                 epoch, loss_all, l_pet, l_ct, l_f, val_all)
        run.save(fingerprint)
    run.history.stopped_early = len(run.history.epochs) < cfg.epochs

    model_a, model_b = run.best
    if evaluate_test and any(e.split == "test" for e in entries):
        run.history.test = evaluate(model_a, model_b, entries, "test", cfg.threshold)
    return model_a, model_b, run.history


def predict(model_a: Model, model_b: Model, case: CaseTriple) -> tuple[np.ndarray, np.ndarray]:
    """Branch probability maps for an already standardized case."""
    p = model_a.forward(case.vol_a.data[None, None])[0][0, 0]
    q = model_b.forward(case.vol_b.data[None, None])[0][0, 0]
    return p, q


def evaluate(model_a: Model, model_b: Model, manifest, split: str = "test",
             threshold: float = 0.5) -> MetricsTable:
    """Per-case and aggregate metrics for the five decision rules."""
    entries = manifest if isinstance(manifest, list) else read_manifest(manifest)
    cases = load_split(entries, split)
    if not cases:
        raise UsageError(f"split {split!r} is empty")
    per = {m: [] for m in METHODS}
    for item in cases:
        p, q = predict(model_a, model_b, item.case)
        g = item.case.mask.data
        maps = {
            "A-only": p,
            "B-only": q,
            "fused": dempster_fuse(p, q)[0],
            "average": baseline_combine("average", p, q),
            "vote": baseline_combine("vote", p, q),
        }
        for name, prob in maps.items():
            per[name].append(metrics(prob, g, threshold))
    rows = {m: MethodSummary(m, per[m]) for m in METHODS}
    return MetricsTable(split, [c.case_id for c in cases], rows, threshold)
