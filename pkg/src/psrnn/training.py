"""Training loop, loss plumbing, and the RDO-lite evaluation harness.

Training follows the reference recipe at desk scale: Adam, step-decayed
learning rate (milestones at 50/75/85% of the run), minibatches of context
windows, and checkpoint selection by the lowest validation loss inside the
final 20% of iterations. The loss is either the tiled SATD of the residue
or plain MSE; both are checked against finite differences in the tests.

Evaluation tiles held-out images into blocks, runs the 35-mode angular
search and the network on every block, charges the network one flag bit and
a baseline mode six bits, and keeps whichever total cost is lower. Costs
use the 8-bit pixel scale so the HM-style lambda is in its usual regime.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .data import ContextBlock, DegradeConfig, GrayImage, degrade, make_context
from .errors import ConfigError, DivergenceError, UsageError
from .hadamard import SatdConfig, satd, satd_batch, satd_loss_grad, satd_loss_grad_batch
from .intra import (DEFAULT_MODE_BITS, NETWORK, NETWORK_FLAG_BITS, ModeCost,
                    best_mode_search, build_reference_samples, hm_lambda,
                    network_mode_cost, predict_mode, smooth_references)
from .layers import AdamState, adam_step, clip_global_norm, lr_at, scaled_schedule
from .model import (NetworkConfig, PsRnnNetwork, PsRnnPlus, backward_batch,
                    build_network, forward_batch, parameters,
                    psrnn_plus_backward_batch, psrnn_plus_forward_batch,
                    psrnn_plus_parameters)
from .rng import stream

RdCost = ModeCost  # rate-distortion cost record shared with the mode search

LOG_HEADER = "iteration,lr,train_loss,val_loss"


@dataclass(frozen=True)
class TrainConfig:
    loss: str = "satd"
    total_iters: int = 5_000
    milestones: tuple[int, ...] | None = None  # None: 50/75/85% of total
    base_lr: float = 0.001
    batch_size: int = 32
    seed: int = 0
    validation_fraction: float = 0.1
    selection_window: float = 0.2  # final fraction searched for the best model
    satd: SatdConfig = field(default_factory=SatdConfig)
    block_size: int = 8
    availability_mode: str = "three-block"
    clip_grad_norm: float | None = 5.0
    val_subset_cap: int = 512
    checkpoint_every: int | None = None  # None: total_iters // 100

    def __post_init__(self):
        if self.loss not in ("satd", "mse"):
            raise ConfigError(f"loss must be 'satd' or 'mse', got {self.loss!r}")
        if self.total_iters < 0 or self.batch_size < 1:
            raise ConfigError("total_iters must be >= 0 and batch_size >= 1")
        if not 0.0 < self.validation_fraction < 1.0:
            raise ConfigError("validation_fraction must lie in (0, 1)")
        if not 0.0 < self.selection_window <= 1.0:
            raise ConfigError("selection_window must lie in (0, 1]")

    def schedule(self):
        sched = scaled_schedule(max(self.total_iters, 1), base_lr=self.base_lr)
        if self.milestones is not None:
            sched = replace(sched, milestones=self.milestones)
        return sched

    def cadence(self) -> int:
        if self.checkpoint_every is not None:
            return max(1, self.checkpoint_every)
        return max(1, self.total_iters // 100)


@dataclass
class SampleSet:
    contexts: np.ndarray  # (m, 2n, 2n) float32
    targets: np.ndarray   # (m, n, n) float32

    def __len__(self):
        return self.contexts.shape[0]


def as_sample_set(data) -> SampleSet:
    if isinstance(data, SampleSet):
        return data
    blocks = list(data)
    if not blocks:
        raise UsageError("empty sample stream")
    if not all(isinstance(b, ContextBlock) for b in blocks):
        raise UsageError("sample stream must yield ContextBlock items")
    return SampleSet(
        contexts=np.stack([b.context for b in blocks]).astype(np.float32),
        targets=np.stack([b.target for b in blocks]).astype(np.float32),
    )


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------


def loss_and_grad(prediction: np.ndarray, target: np.ndarray, loss_kind: str,
                  satd_cfg: SatdConfig = SatdConfig()):
    """Per-sample loss value and gradient with respect to the prediction."""
    if prediction.shape != target.shape:
        raise UsageError(f"shapes differ: {prediction.shape} vs {target.shape}")
    d = prediction.astype(np.float64) - target.astype(np.float64)
    if loss_kind == "satd":
        return satd(d, satd_cfg), satd_loss_grad(d, satd_cfg)
    if loss_kind == "mse":
        count = d.size
        loss = float(np.mean(d * d))
        return loss, (2.0 * d / count).astype(np.float32)
    raise ConfigError(f"loss must be 'satd' or 'mse', got {loss_kind!r}")


def _batch_loss_grad(preds: np.ndarray, targets: np.ndarray, loss_kind: str,
                     satd_cfg: SatdConfig):
    """Mean loss over the batch and d(loss)/d(pred), float64."""
    d = preds - targets.astype(np.float64)
    b = d.shape[0]
    if loss_kind == "satd":
        loss = float(satd_batch(d, satd_cfg).mean())
        grad = satd_loss_grad_batch(d, satd_cfg) / b
    else:
        per = d.shape[1] * d.shape[2]
        loss = float((d * d).sum(axis=(1, 2)).mean() / per)
        grad = 2.0 * d / (per * b)
    return loss, grad


def _batch_metric(preds: np.ndarray, targets: np.ndarray, loss_kind: str,
                  satd_cfg: SatdConfig) -> float:
    d = preds - targets.astype(np.float64)
    if loss_kind == "satd":
        return float(satd_batch(d, satd_cfg).mean())
    per = d.shape[1] * d.shape[2]
    return float((d * d).sum(axis=(1, 2)).mean() / per)


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


@dataclass
class LogRow:
    iteration: int
    lr: float
    train_loss: float
    val_loss: float

    def csv(self) -> str:
        return f"{self.iteration},{self.lr!r},{self.train_loss!r},{self.val_loss!r}"


def write_training_log(rows: list[LogRow], path) -> None:
    with open(path, "w") as fh:
        fh.write(LOG_HEADER + "\n")
        for row in rows:
            fh.write(row.csv() + "\n")


def _forward_chunked(net: PsRnnNetwork, contexts: np.ndarray, chunk: int = 128) -> np.ndarray:
    preds = []
    for i in range(0, contexts.shape[0], chunk):
        p, _ = forward_batch(net, contexts[i : i + chunk], need_cache=False)
        preds.append(p)
    return np.concatenate(preds, axis=0)


def validation_metric(net: PsRnnNetwork, contexts, targets, loss_kind: str,
                      satd_cfg: SatdConfig) -> float:
    preds = _forward_chunked(net, contexts)
    return _batch_metric(preds, targets, loss_kind, satd_cfg)


def train(net: PsRnnNetwork, data, cfg: TrainConfig):
    """Run the minibatch loop; returns (best network, validation log rows).

    The returned network is the checkpoint with the lowest validation loss
    inside the final selection window (it is `net` itself, with its
    parameters overwritten). Deterministic given cfg.seed.
    """
    samples = as_sample_set(data)
    if net.config.pu_size != cfg.block_size:
        raise ConfigError(
            f"network pu_size {net.config.pu_size} != config block_size {cfg.block_size}")
    if samples.contexts.shape[1] != net.config.context_size:
        raise ConfigError(
            f"samples sized {samples.contexts.shape[1]} != context {net.config.context_size}")

    split = stream(cfg.seed, "split").permutation(len(samples))
    n_val = max(1, int(round(len(samples) * cfg.validation_fraction)))
    if n_val >= len(samples):
        raise UsageError("not enough samples to split off a validation set")
    val_idx = split[:n_val][: cfg.val_subset_cap]
    train_idx = split[n_val:]
    val_ctx = samples.contexts[val_idx]
    val_tgt = samples.targets[val_idx]

    params = parameters(net)
    state = AdamState()
    sched = cfg.schedule()
    cadence = cfg.cadence()
    window_start = cfg.total_iters - int(round(cfg.total_iters * cfg.selection_window))

    rows = [LogRow(0, lr_at(sched, 0) if cfg.total_iters else cfg.base_lr,
                   float("nan"),
                   validation_metric(net, val_ctx, val_tgt, cfg.loss, cfg.satd))]
    if cfg.total_iters == 0:
        return net, rows

    batches = stream(cfg.seed, "batches")
    best_val = math.inf
    best_params: dict[str, np.ndarray] | None = None
    recent: list[float] = []

    for it in range(cfg.total_iters):
        idx = batches.integers(0, len(train_idx), size=cfg.batch_size)
        pick = train_idx[idx]
        preds, caches = forward_batch(net, samples.contexts[pick])
        loss, grad_pred = _batch_loss_grad(preds, samples.targets[pick], cfg.loss, cfg.satd)
        if not math.isfinite(loss):
            raise DivergenceError(it)
        grads = backward_batch(net, caches, grad_pred)
        if cfg.clip_grad_norm is not None:
            clip_global_norm(grads, cfg.clip_grad_norm)
        adam_step(params, grads, state, lr_at(sched, it))
        recent.append(loss)

        done = it + 1
        if done % cadence == 0 or done == cfg.total_iters:
            val = validation_metric(net, val_ctx, val_tgt, cfg.loss, cfg.satd)
            rows.append(LogRow(done, lr_at(sched, it), float(np.mean(recent)), val))
            recent = []
            if done > window_start and val < best_val:
                best_val = val
                best_params = {k: v.copy() for k, v in params.items()}

    if best_params is not None:
        for k, v in params.items():
            v[...] = best_params[k]
    return net, rows


# ---------------------------------------------------------------------------
# RDO-lite evaluation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EvalConfig:
    block_sizes: tuple[int, ...] = (8,)
    policy: str = "fixed"  # fixed tiling, or greedy top-down splitting
    mode_bits: float = DEFAULT_MODE_BITS
    flag_bits: float = NETWORK_FLAG_BITS
    split_flag_bits: float = 1.0
    satd: SatdConfig = field(default_factory=SatdConfig)
    oracle: bool = False
    ref_smoothing: bool = False

    def __post_init__(self):
        if self.policy not in ("fixed", "greedy"):
            raise ConfigError(f"policy must be fixed or greedy, got {self.policy!r}")
        if any(s not in (4, 8, 16, 32) for s in self.block_sizes):
            raise ConfigError(f"block sizes must be drawn from 4/8/16/32: {self.block_sizes}")


@dataclass
class BlockRecord:
    origin: tuple[int, int]
    n: int
    base: ModeCost
    net: ModeCost | None
    winner: str  # "baseline" or "network"
    base_mse: float
    net_mse: float | None

    @property
    def winner_total(self) -> float:
        if self.winner == NETWORK and self.net is not None:
            return self.net.total
        return self.base.total


@dataclass
class EvalReport:
    records: list[BlockRecord]
    summary: dict

    def csv_rows(self):
        yield ("origin_y,origin_x,n,base_mode,base_satd,base_bits,base_total,"
               "net_satd,net_bits,net_total,winner")
        for r in self.records:
            net_satd = "" if r.net is None else repr(r.net.satd)
            net_bits = "" if r.net is None else repr(r.net.bits_proxy)
            net_total = "" if r.net is None else repr(r.net.total)
            yield (f"{r.origin[0]},{r.origin[1]},{r.n},{r.base.mode},"
                   f"{r.base.satd!r},{r.base.bits_proxy!r},{r.base.total!r},"
                   f"{net_satd},{net_bits},{net_total},{r.winner}")


class Predictor:
    """Uniform interface over the per-size model set and the composite."""

    def __init__(self, nets: dict[int, PsRnnNetwork] | None = None,
                 composites: dict[int, PsRnnPlus] | None = None):
        self.nets = nets or {}
        self.composites = composites or {}

    def supports(self, n: int) -> bool:
        return n in self.nets or n in self.composites

    def context_spec(self, n: int) -> tuple[str, float]:
        if n in self.nets:
            c = self.nets[n].config
        else:
            c = self.composites[n].base.config
        return c.availability_mode, c.fill_value

    def predict_batch(self, n: int, contexts: np.ndarray) -> np.ndarray:
        if n in self.nets:
            preds, _ = forward_batch(self.nets[n], contexts)
            return preds
        preds, _ = psrnn_plus_forward_batch(self.composites[n], contexts)
        return preds


def evaluate(nets, images: list[GrayImage], qp: int,
             cfg: EvalConfig = EvalConfig()) -> EvalReport:
    """Tile images, race the angular baseline against the network per block.

    `nets` may be a dict {n: PsRnnNetwork}, a Predictor, or None (baseline
    only / oracle). Contexts are built with the availability mode and fill
    value the corresponding model was trained with.
    """
    predictor = nets if isinstance(nets, Predictor) else Predictor(nets)
    if not cfg.oracle:
        for n in cfg.block_sizes:
            if nets is not None and not predictor.supports(n):
                raise ConfigError(f"no model loaded for block size {n}")
    lam = hm_lambda(qp)
    records: list[BlockRecord] = []
    for image in images:
        recon = degrade(image, DegradeConfig(qp=qp))
        if cfg.policy == "fixed":
            for n in cfg.block_sizes:
                records.extend(_eval_fixed(predictor, image, recon, n, lam, cfg,
                                           baseline_only=nets is None and not cfg.oracle))
        else:
            records.extend(_eval_greedy(predictor, image, recon, lam, cfg))
    return _make_report(records, qp, lam)


def _tile_origins(shape: tuple[int, int], n: int):
    h, w = shape
    for y in range(n, h - n + 1, n):
        for x in range(n, w - n + 1, n):
            yield y, x


def _block_record(image: GrayImage, recon: GrayImage,
                  origin: tuple[int, int], n: int, lam: float, cfg: EvalConfig,
                  net_pred: np.ndarray | None) -> BlockRecord:
    y, x = origin
    target = image.pixels[y : y + n, x : x + n].astype(np.float64)
    refs = build_reference_samples(recon.pixels, origin, n)
    if cfg.ref_smoothing:
        refs = smooth_references(refs)
    base = best_mode_search(refs, target, n, lam, cfg.satd, cfg.mode_bits)
    base_pred = predict_mode(refs, base.mode, n)
    base_mse = float(np.mean((base_pred - target) ** 2))
    if cfg.oracle:
        net_pred = target
    if net_pred is None:
        return BlockRecord(origin=origin, n=n, base=base, net=None,
                           winner="baseline", base_mse=base_mse, net_mse=None)
    net_cost = network_mode_cost(satd(net_pred - target, cfg.satd), lam, cfg.flag_bits)
    winner = NETWORK if net_cost.total < base.total else "baseline"
    net_mse = float(np.mean((net_pred - target) ** 2))
    return BlockRecord(origin=origin, n=n, base=base, net=net_cost,
                       winner=winner, base_mse=base_mse, net_mse=net_mse)


def _eval_fixed(predictor: Predictor, image: GrayImage, recon: GrayImage, n: int,
                lam: float, cfg: EvalConfig, baseline_only: bool) -> list[BlockRecord]:
    origins = list(_tile_origins(image.pixels.shape, n))
    net_preds: dict[tuple[int, int], np.ndarray] = {}
    if not baseline_only and not cfg.oracle and predictor.supports(n):
        mode, fill = predictor.context_spec(n)
        contexts = np.stack([
            make_context(recon.pixels, image.pixels, (y - n, x - n), n, mode, fill).context
            for y, x in origins
        ])
        for i in range(0, len(origins), 256):
            chunk = predictor.predict_batch(n, contexts[i : i + 256])
            for j, pred in enumerate(chunk):
                net_preds[origins[i + j]] = pred
    out = []
    for origin in origins:
        out.append(_block_record(image, recon, origin, n, lam, cfg,
                                 net_preds.get(origin)))
    return out


def _eval_greedy(predictor: Predictor, image: GrayImage, recon: GrayImage,
                 lam: float, cfg: EvalConfig) -> list[BlockRecord]:
    sizes = sorted(cfg.block_sizes, reverse=True)
    if len(sizes) < 2:
        raise ConfigError("greedy policy needs at least two block sizes")

    def eval_one(origin, n) -> BlockRecord:
        pred = None
        if cfg.oracle or predictor.supports(n):
            if not cfg.oracle:
                mode, fill = predictor.context_spec(n)
                ctx = make_context(recon.pixels, image.pixels,
                                   (origin[0] - n, origin[1] - n), n, mode, fill).context
                pred = predictor.predict_batch(n, ctx[None])[0]
        return _block_record(image, recon, origin, n, lam, cfg, pred)

    def descend(origin, n) -> list[BlockRecord]:
        whole = eval_one(origin, n)
        if n == sizes[-1] or n // 2 not in sizes:
            return [whole]
        half = n // 2
        children: list[BlockRecord] = []
        for dy in (0, half):
            for dx in (0, half):
                children.extend(descend((origin[0] + dy, origin[1] + dx), half))
        split_cost = sum(r.winner_total for r in children) + lam * cfg.split_flag_bits
        return children if split_cost < whole.winner_total else [whole]

    out: list[BlockRecord] = []
    top = sizes[0]
    for origin in _tile_origins(image.pixels.shape, top):
        out.extend(descend(origin, top))
    return out


def _make_report(records: list[BlockRecord], qp: int, lam: float) -> EvalReport:
    n_blocks = len(records)
    base_total = sum(r.base.total for r in records)
    winner_total = sum(r.winner_total for r in records)
    with_net = [r for r in records if r.net is not None]
    selected = sum(1 for r in records if r.winner == NETWORK)
    summary = {
        "blocks": n_blocks,
        "qp": qp,
        "lambda": lam,
        "selection_rate_pct": 100.0 * selected / n_blocks if n_blocks else 0.0,
        "mean_cost_reduction_pct":
            100.0 * (base_total - winner_total) / base_total if base_total else 0.0,
        "mean_satd_baseline":
            float(np.mean([r.base.satd for r in records])) if records else 0.0,
        "mean_satd_network":
            float(np.mean([r.net.satd for r in with_net])) if with_net else float("nan"),
        "mean_mse_baseline":
            float(np.mean([r.base_mse for r in records])) if records else 0.0,
        "mean_mse_network":
            float(np.mean([r.net_mse for r in with_net])) if with_net else float("nan"),
    }
    return EvalReport(records=records, summary=summary)


# ---------------------------------------------------------------------------
# Experiments: loss comparison, unit-count ablation, composite fine-tuning
# ---------------------------------------------------------------------------


def _network_for(cfg: TrainConfig, seed: int, unit_hidden=None,
                 net_config: NetworkConfig | None = None) -> PsRnnNetwork:
    if net_config is None:
        net_config = NetworkConfig(pu_size=cfg.block_size,
                                   availability_mode=cfg.availability_mode,
                                   unit_hidden=unit_hidden or (8, 4, 4))
    return build_network(net_config, seed=seed)


def compare_losses(data, cfg_base: TrainConfig, seeds,
                   kinds: tuple[str, str] = ("satd", "mse"),
                   net_config: NetworkConfig | None = None) -> dict:
    """Train paired SATD/MSE models per seed on identical sample streams.

    Both arms of a seed share the init and the batch sequence, so only the
    training loss differs. Returns per-seed validation SATD and MSE of both
    arms plus the median SATD gap between the second and the first arm
    (positive favors the first). `kinds` exists so a control run can put the
    same loss in both arms.
    """
    seeds = list(seeds)
    if len(seeds) < 3:
        raise UsageError("loss comparison needs at least 3 seeds")
    samples = as_sample_set(data)
    rows = []
    for seed in seeds:
        row = {"seed": seed}
        for arm, kind in zip(("satd", "mse"), kinds):
            cfg = replace(cfg_base, loss=kind, seed=seed)
            net = _network_for(cfg, seed, net_config=net_config)
            net, _ = train(net, samples, cfg)
            split = stream(seed, "split").permutation(len(samples))
            val_idx = split[: max(1, int(round(len(samples) * cfg.validation_fraction)))]
            val_idx = val_idx[: cfg.val_subset_cap]
            ctx, tgt = samples.contexts[val_idx], samples.targets[val_idx]
            row[f"{arm}_val_satd"] = validation_metric(net, ctx, tgt, "satd", cfg.satd)
            row[f"{arm}_val_mse"] = validation_metric(net, ctx, tgt, "mse", cfg.satd)
        row["satd_gap"] = row["mse_val_satd"] - row["satd_val_satd"]
        rows.append(row)
    gaps = sorted(r["satd_gap"] for r in rows)
    return {"rows": rows, "median_gap": float(np.median(gaps)),
            "median_satd_trained": float(np.median([r["satd_val_satd"] for r in rows])),
            "median_mse_trained": float(np.median([r["mse_val_satd"] for r in rows]))}


def ablate_units(data, unit_counts, cfg: TrainConfig, eval_images: list[GrayImage],
                 qp: int = 32) -> list[dict]:
    """Train one model per recurrent-unit count at a fixed budget."""
    rows = []
    for count in unit_counts:
        if count < 1:
            raise UsageError("network must contain at least one recurrent unit")
        hidden = (8,) + (4,) * (count - 1)
        net = _network_for(cfg, cfg.seed, unit_hidden=hidden)
        net, log = train(net, data, cfg)
        report = evaluate({cfg.block_size: net}, eval_images, qp,
                          EvalConfig(block_sizes=(cfg.block_size,), satd=cfg.satd))
        rows.append({
            "units": count,
            "val_satd": log[-1].val_loss if cfg.loss == "satd" else float("nan"),
            "final_val_loss": log[-1].val_loss,
            "selection_rate_pct": report.summary["selection_rate_pct"],
            "cost_reduction_pct": report.summary["mean_cost_reduction_pct"],
        })
    return rows


def fine_tune_psrnn_plus(plus: PsRnnPlus, data, iters: int = 300,
                         lr: float = 1e-3, batch_size: int = 16,
                         seed: int = 0, satd_cfg: SatdConfig = SatdConfig()):
    """Adapt the rescaling heads on target-size samples; the base is frozen."""
    samples = as_sample_set(data)
    if samples.contexts.shape[1] != 2 * plus.target_n:
        raise ConfigError(
            f"samples sized {samples.contexts.shape[1]} != context {2 * plus.target_n}")
    params = psrnn_plus_parameters(plus)
    state = AdamState()
    batches = stream(seed, "plus-batches")
    losses = []
    for it in range(iters):
        idx = batches.integers(0, len(samples), size=batch_size)
        preds, caches = psrnn_plus_forward_batch(plus, samples.contexts[idx])
        loss, grad_pred = _batch_loss_grad(preds, samples.targets[idx], "satd", satd_cfg)
        if not math.isfinite(loss):
            raise DivergenceError(it)
        grads = psrnn_plus_backward_batch(plus, caches, grad_pred)
        clip_global_norm(grads, 5.0)
        adam_step(params, grads, state, lr)
        losses.append(loss)
    return plus, losses
