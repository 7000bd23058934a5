"""Adam, clipping, KL annealing, validation and the training loop."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .data import Batch, Dialogue, make_batches, make_rng
from .models import ModelBundle, Terms
from .tensor import ContractError, DimensionError, Tape, backward

logger = logging.getLogger(__name__)

LOG_COLUMNS = ("batch", "bound", "reconstruction", "kl", "kl_weight", "grad_norm", "seconds")


class TrainingError(RuntimeError):
    pass


@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], s: AdamState,
              lr: float) -> tuple[dict[str, np.ndarray], AdamState]:
    """One bias-corrected Adam update, applied in place to ``params``."""
    if lr <= 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    s.step += 1
    c1 = 1.0 - s.beta1 ** s.step
    c2 = 1.0 - s.beta2 ** s.step
    for k, p in params.items():
        g = grads[k]
        if g.shape != p.shape:
            raise DimensionError(f"{k}: gradient shape {g.shape} vs parameter {p.shape}")
        m = s.m.get(k)
        if m is None:
            m = s.m[k] = np.zeros_like(p)
            s.v[k] = np.zeros_like(p)
        v = s.v[k]
        m *= s.beta1
        m += (1.0 - s.beta1) * g
        v *= s.beta2
        v += (1.0 - s.beta2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + s.epsilon)
    return params, s


def global_norm(grads) -> float:
    return math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))


def clip_gradients(grads: dict[str, np.ndarray], threshold: float):
    """Rescale all gradients when their global L2 norm exceeds ``threshold``.

    Returns the (possibly) rescaled gradients and the pre-clip norm.
    """
    if threshold <= 0:
        raise ValueError("clip threshold must be positive")
    norm = global_norm(grads)
    if norm > threshold:
        scale = threshold / norm
        grads = {k: g * scale for k, g in grads.items()}
    return grads, norm


def kl_anneal_weight(batch_index: int, ramp: int) -> float:
    if batch_index < 0:
        raise ValueError("batch_index must be >= 0")
    if ramp <= 0:
        return 1.0
    return min(1.0, batch_index / ramp)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 2e-4
    batch_size: int = 80
    clip_threshold: float = 1.0
    kl_ramp_batches: int = 60000
    word_drop_rate: float = 0.25
    validate_every: int = 5000
    patience: int = 5
    max_batches: int = 1_000_000
    seed: int = 0
    max_unroll: int | None = 80
    valid_samples: int = 10
    log_wall_time: bool = False

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.kl_ramp_batches < 0:
            raise ValueError("kl_ramp_batches must be >= 0")
        if self.validate_every <= 0:
            raise ValueError("validate_every must be positive")
        if not 0.0 <= self.word_drop_rate < 1.0:
            raise ValueError("word_drop_rate must lie in [0, 1)")


@dataclass
class EarlyStopState:
    """Patience bookkeeping; ``since`` counts validation rounds without improvement."""

    best: float = -math.inf
    since: int = 0
    stopped: bool = False

    def update(self, value: float, patience: int) -> bool:
        if value > self.best:
            self.best, self.since = value, 0
            return True
        self.since += 1
        if self.since >= patience:
            self.stopped = True
        return False


# ---------------------------------------------------------------- validation

def _scored(terms: Terms):
    nll = float(terms.nll.data.sum())
    kl = 0.0 if terms.kl is None else float(terms.kl.data.sum())
    return nll, kl, int(terms.n_tokens.sum()), len(terms.targets)


def score_corpus(model: ModelBundle, corpus: Sequence[Dialogue], latent: str,
                 rng: np.random.Generator | None = None, kl_weight: float = 1.0,
                 batch_size: int = 64) -> dict:
    nll = kl = 0.0
    n_tok = n_utt = 0
    for i in range(0, len(corpus), batch_size):
        batch = Batch.from_dialogues(corpus[i:i + batch_size])
        terms = model.forward_segment(batch, batch.segments[0], rng=rng, latent=latent)
        a, b, c, d = _scored(terms)
        nll, kl, n_tok, n_utt = nll + a, kl + b, n_tok + c, n_utt + d
    bound = -(nll + kl_weight * kl)
    return {"bound_per_token": bound / n_tok, "bound_per_utterance": bound / n_utt,
            "reconstruction_per_token": nll / n_tok, "kl_per_utterance": kl / n_utt,
            "tokens": n_tok, "utterances": n_utt}


def validate(model: ModelBundle, corpus: Sequence[Dialogue], kl_weight: float = 1.0,
             samples: int = 10, seed: int = 0) -> dict:
    """Deterministic (posterior-mean z) and Monte-Carlo validation bounds.

    The Monte-Carlo part repeats the corpus pass ``samples`` times with fresh
    posterior noise and reports the mean bound per token and its standard error.
    """
    if not corpus:
        raise ContractError("validation corpus is empty")
    latent = "posterior_mean"
    det = score_corpus(model, corpus, latent, kl_weight=kl_weight)
    out = {"deterministic": det}
    if model.kind == "vhred" and samples > 0:
        per_sample = np.array([
            score_corpus(model, corpus, "posterior_sample", make_rng(seed, "validate", s),
                         kl_weight)["bound_per_token"] for s in range(samples)])
        se = per_sample.std(ddof=1) / math.sqrt(samples) if samples > 1 else 0.0
        out["monte_carlo"] = {"bound_per_token": float(per_sample.mean()),
                              "stderr": float(se), "samples": per_sample.tolist()}
    else:
        out["monte_carlo"] = {"bound_per_token": det["bound_per_token"], "stderr": 0.0,
                              "samples": [det["bound_per_token"]]}
    return out


# ------------------------------------------------------------------ training

@dataclass
class TrainResult:
    log: list[dict]
    validations: list[dict]
    best_state: dict
    best_batch: int
    stop_reason: str
    adam: AdamState


def format_log_row(row: dict, wall: bool) -> str:
    secs = f"{row['seconds']:.3f}" if wall else "-"
    return (f"{row['batch']}\t{row['bound']:.10g}\t{row['reconstruction']:.10g}\t{row['kl']:.10g}\t"
            f"{row['kl_weight']:.10g}\t{row['grad_norm']:.10g}\t{secs}")


def train_batch(model: ModelBundle, batch: Batch, kl_weight: float, word_drop: float,
                rng: np.random.Generator) -> tuple[dict, dict]:
    """Forward/backward over every segment of a batch; returns per-token grads and stats."""
    model.zero_grad()
    carry = None
    nll = kl = 0.0
    n_tok = n_utt = 0
    for seg in batch.segments:
        with Tape() as tape:
            terms = model.forward_segment(batch, seg, carry, rng=rng,
                                          word_drop=word_drop if model.kind == "vhred" else 0.0)
            loss = -terms.bound(kl_weight)
        a, b, c, d = _scored(terms)
        nll, kl, n_tok, n_utt = nll + a, kl + b, n_tok + c, n_utt + d
        if c:
            backward(loss, tape)
        carry = terms.carry
    params = model.params()
    scale = 1.0 / max(n_tok, 1)
    grads = {k: (np.zeros_like(p.data) if p.grad is None else p.grad * scale)
             for k, p in params.items()}
    stats = {"reconstruction": nll / max(n_tok, 1), "kl": kl / max(n_utt, 1),
             "bound": -(nll + kl_weight * kl) / max(n_tok, 1), "tokens": n_tok}
    return grads, stats


def train(model: ModelBundle, corpus: Sequence[Dialogue], valid_corpus: Sequence[Dialogue],
          cfg: TrainConfig, log_path=None, checkpoint_path=None,
          validate_fn: Callable[[ModelBundle], float] | None = None,
          restore_best: bool = True) -> TrainResult:
    """Train ``model`` in place.

    Validation runs once before the first batch (the baseline for patience)
    and then every ``cfg.validate_every`` batches; the deterministic bound per
    token is the early-stopping signal unless ``validate_fn`` supplies one.
    """
    if not corpus or not valid_corpus:
        raise ContractError("training and validation corpora must be nonempty")
    rng = make_rng(cfg.seed, "train")
    adam = AdamState()
    stopper = EarlyStopState()
    log_rows, validations = [], []
    fh = open(log_path, "w", encoding="utf-8") if log_path else None
    if fh:
        fh.write("\t".join(LOG_COLUMNS) + "\n")

    def run_validation(batch_index):
        if validate_fn is not None:
            value, report = float(validate_fn(model)), {}
        else:
            report = validate(model, valid_corpus, samples=cfg.valid_samples, seed=cfg.seed)
            value = report["deterministic"]["bound_per_token"]
        improved = stopper.update(value, cfg.patience) if validations else stopper.update(value, 10**9)
        validations.append({"batch": batch_index, "value": value, "improved": improved, **report})
        logger.info("validation after %d batches: %.5f%s", batch_index, value,
                    " (best)" if improved else "")
        return improved

    best_state = model.state_dict()
    best_batch = 0
    run_validation(0)
    if checkpoint_path:
        model.save(checkpoint_path, extra={"batch": 0})
    start = time.perf_counter()
    stop_reason = "max_batches"
    batches = make_batches(corpus, cfg.batch_size, cfg.max_unroll, cfg.seed, epochs=None)
    try:
        for i in range(cfg.max_batches):
            batch = next(batches)
            w = kl_anneal_weight(i, cfg.kl_ramp_batches) if model.kind == "vhred" else 1.0
            grads, stats = train_batch(model, batch, w, cfg.word_drop_rate, rng)
            for name in ("reconstruction", "kl", "bound"):
                if not math.isfinite(stats[name]):
                    raise TrainingError(f"non-finite {name} ({stats[name]}) at batch {i}")
            grads, norm = clip_gradients(grads, cfg.clip_threshold)
            if not math.isfinite(norm):
                raise TrainingError(f"non-finite gradient norm at batch {i}")
            params = {k: p.data for k, p in model.params().items()}
            adam_step(params, grads, adam, cfg.learning_rate)
            row = {"batch": i, "bound": stats["bound"], "reconstruction": stats["reconstruction"],
                   "kl": stats["kl"], "kl_weight": w, "grad_norm": norm,
                   "seconds": time.perf_counter() - start}
            log_rows.append(row)
            if fh:
                fh.write(format_log_row(row, cfg.log_wall_time) + "\n")
            if (i + 1) % cfg.validate_every == 0:
                if run_validation(i + 1):
                    best_state, best_batch = model.state_dict(), i + 1
                    if checkpoint_path:
                        model.save(checkpoint_path, extra={"batch": i + 1})
                if stopper.stopped:
                    stop_reason = "patience"
                    break
    finally:
        if fh:
            fh.close()
    if restore_best:
        model.load_state_dict(best_state)
    return TrainResult(log_rows, validations, best_state, best_batch, stop_reason, adam)


def read_log(path) -> list[dict]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    out = []
    for line in lines[1:]:
        f = line.split("\t")
        out.append({"batch": int(f[0]), "bound": float(f[1]), "reconstruction": float(f[2]),
                    "kl": float(f[3]), "kl_weight": float(f[4]), "grad_norm": float(f[5]),
                    "seconds": None if f[6] == "-" else float(f[6])})
    return out
