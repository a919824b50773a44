"""Losses, optimizer, training loop, and the ablation runner.

Per-task losses are L1 for dense regression (depth, normals) and pixel
cross-entropy for classification-style tasks, combined as a weighted sum.
Training uses Adam with decoupled weight decay under a polynomial
learning-rate schedule and is bit-deterministic under (seed, config, data).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as T
from .data import SceneSample, dataset_iter
from .errors import DataError, MetricError, NumericalError
from .metrics import (
    MetricReport,
    metric_boundary_f,
    metric_merr,
    metric_miou,
    metric_rmse,
    mtl_gain,
)
from .model import (
    Model,
    ModelConfig,
    TaskSpec,
    biscan_only_config,
    model_forward,
    msscan_only_config,
    mtl_baseline_config,
    save_checkpoint,
    single_task_config,
)
from .tensor import Tensor

IGNORE_LABEL = -1


# ---------------------------------------------------------------------------
# losses


def cross_entropy_logits(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean pixel cross-entropy over valid labels (fused, numerically stable).

    Labels equal to IGNORE_LABEL are excluded from numerator and count.
    """
    if logits.ndim != 2:
        raise DataError(f"logits must be (P, K), got {logits.shape}")
    n, k = logits.shape
    labels = np.asarray(labels).reshape(-1)
    if labels.shape[0] != n:
        raise DataError(f"{labels.shape[0]} labels for {n} predictions")
    valid = labels != IGNORE_LABEL
    if not valid.any():
        raise DataError("no valid labels for cross-entropy")
    if labels[valid].min() < 0 or labels[valid].max() >= k:
        raise DataError("class id outside the logit range")

    z = logits.data
    zmax = z.max(axis=1, keepdims=True)
    ez = np.exp(z - zmax)
    lse = np.log(ez.sum(axis=1)) + zmax[:, 0]
    picked = z[np.arange(n), np.where(valid, labels, 0)]
    count = int(valid.sum())
    loss = float(((lse - picked) * valid).sum() / count)

    def backward(g):
        soft = ez / ez.sum(axis=1, keepdims=True)
        soft[np.arange(n), np.where(valid, labels, 0)] -= 1.0
        soft[~valid] = 0.0
        T._accum(logits, soft * (float(g.reshape(-1)[0]) / count))

    return T.make_node(np.asarray(loss), (logits,), backward, "cross_entropy")


def l1_loss(pred: Tensor, target: np.ndarray) -> Tensor:
    """Mean absolute error; target must be finite everywhere."""
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise DataError(f"prediction {pred.shape} vs target {target.shape}")
    if not np.isfinite(target).all():
        raise DataError("non-finite values in a regression target")
    diff = T.abs_(T.sub(pred, Tensor(target)))
    return T.mean_(T.reshape(diff, (pred.size,)))


def _task_targets(sample: SceneSample, task: TaskSpec) -> np.ndarray:
    if task.name == "depth":
        return sample.depth[:, :, None]
    if task.name == "normal":
        return sample.normals.transpose(1, 2, 0)
    if task.name == "semseg":
        return sample.semseg
    if task.name == "boundary":
        return sample.boundary
    # synthetic ladder tasks regress depth by default
    return sample.depth[:, :, None]


def loss_total(preds: dict[str, Tensor], sample: SceneSample,
               tasks: tuple[TaskSpec, ...]) -> Tensor:
    """Weighted sum of per-task losses for one sample."""
    total = None
    for t in tasks:
        pred = preds[t.name]
        target = _task_targets(sample, t)
        if t.loss == "cross_entropy":
            flat = T.reshape(pred, (pred.shape[0] * pred.shape[1], pred.shape[2]))
            term = cross_entropy_logits(flat, target)
        else:
            term = l1_loss(pred, target)
        term = T.mul(term, Tensor(t.weight))
        total = term if total is None else T.add(total, term)
    return total


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0


def adam_init(params: dict[str, Tensor]) -> AdamState:
    return AdamState(
        {k: np.zeros_like(p.data) for k, p in params.items()},
        {k: np.zeros_like(p.data) for k, p in params.items()},
    )


def adam_step(params: dict[str, Tensor], state: AdamState, lr: float,
              weight_decay: float = 0.0, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> None:
    """Adam with decoupled weight decay; missing grads count as zero."""
    state.step += 1
    bc1 = 1.0 - beta1 ** state.step
    bc2 = 1.0 - beta2 ** state.step
    for name, p in params.items():
        g = p.grad if p.grad is not None else 0.0
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * np.square(g)
        update = (m / bc1) / (np.sqrt(v / bc2) + eps)
        if weight_decay:
            update = update + weight_decay * p.data
        p.data = p.data - lr * update


def poly_lr(base_lr: float, iteration: int, total: int, power: float = 0.9) -> float:
    """Polynomial decay; exactly zero at the final iteration count."""
    frac = min(max(iteration / total, 0.0), 1.0)
    return base_lr * (1.0 - frac) ** power


# ---------------------------------------------------------------------------
# evaluation


def _task_metric(task: TaskSpec) -> str:
    by_name = {"semseg": "miou", "depth": "rmse", "normal": "merr",
               "boundary": "boundary_f"}
    if task.name in by_name:
        return by_name[task.name]
    return "miou" if task.loss == "cross_entropy" else "rmse"


def _eval_task(pred: np.ndarray, sample: SceneSample, task: TaskSpec) -> tuple[float, bool]:
    kind = _task_metric(task)
    if kind == "miou":
        classes = pred.argmax(axis=2)
        return metric_miou(classes, sample.semseg, task.out_channels), True
    if kind == "boundary_f":
        z = pred - pred.max(axis=2, keepdims=True)
        ez = np.exp(z)
        prob = ez[:, :, 1] / ez.sum(axis=2)
        return metric_boundary_f(prob, sample.boundary), True
    if kind == "merr":
        return metric_merr(pred.transpose(2, 0, 1), sample.normals), False
    target = _task_targets(sample, task)
    return metric_rmse(pred.reshape(-1), target.reshape(-1)), False


def evaluate(model: Model, samples, order_rng: np.random.Generator | None = None,
             ) -> tuple[MetricReport, float]:
    """Mean per-task metrics and mean loss over an evaluation set."""
    tasks = model.cfg.tasks
    sums = {t.name: 0.0 for t in tasks}
    loss_sum = 0.0
    report = MetricReport()
    with T.no_grad():
        for sample in samples:
            if order_rng is not None:
                model.order_override = tuple(order_rng.permutation(len(tasks)))
            preds = model_forward(model, Tensor(sample.image))
            loss_sum += loss_total(preds, sample, tasks).item()
            for t in tasks:
                value, higher = _eval_task(preds[t.name].data, sample, t)
                sums[t.name] += value
                report.higher_better[t.name] = higher
    for t in tasks:
        report.values[t.name] = sums[t.name] / len(samples)
    return report, loss_sum / len(samples)


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainSettings:
    iterations: int = 1000
    batch_size: int = 4
    lr: float = 3e-4
    weight_decay: float = 1e-5
    poly_power: float = 0.9
    eval_every: int = 200
    augment: bool = True
    crop_hw: tuple[int, int] | None = None
    random_task_order: bool = False


@dataclass
class TrainResult:
    history: list[dict]                 # one row per iteration
    evals: list[tuple[int, MetricReport, float]]
    final_report: MetricReport
    final_val_loss: float
    best_iteration: int
    model: Model


def train(cfg: ModelConfig, train_samples, val_samples, settings: TrainSettings,
          seed: int, checkpoint_path=None,
          reference: MetricReport | None = None) -> TrainResult:
    """Deterministic under (seed, config, data).

    The best checkpoint is chosen by validation gain against `reference`
    (the iteration-0 validation report when none is given).
    """
    h, w = settings.crop_hw or train_samples[0].hw
    model = Model(cfg, seed=seed, input_hw=(h, w))
    model.order_override = None
    state = adam_init(model.params)
    batches = dataset_iter(train_samples, settings.batch_size, seed + 1,
                           augment=settings.augment, crop_hw=settings.crop_hw)
    order_rng = np.random.default_rng(seed + 2) if settings.random_task_order else None

    def eval_rng():
        return np.random.default_rng(seed + 3) if settings.random_task_order else None

    if reference is None:
        reference, _ = evaluate(model, val_samples, order_rng=eval_rng())
    best_gain = -np.inf
    best_iteration = -1
    history: list[dict] = []
    evals: list[tuple[int, MetricReport, float]] = []

    def run_eval(iteration):
        nonlocal best_gain, best_iteration
        report, val_loss = evaluate(model, val_samples, order_rng=eval_rng())
        evals.append((iteration, report, val_loss))
        try:
            gain = mtl_gain(report, reference)
        except MetricError:
            gain = -val_loss
        if gain > best_gain:
            best_gain = gain
            best_iteration = iteration
            if checkpoint_path is not None:
                save_checkpoint(checkpoint_path, model)
        return report, val_loss

    for it in range(settings.iterations):
        if order_rng is not None:
            model.order_override = tuple(order_rng.permutation(cfg.n_tasks))
        batch = next(batches)
        loss = None
        try:
            for sample in batch:
                preds = model_forward(model, Tensor(sample.image))
                term = loss_total(preds, sample, cfg.tasks)
                loss = term if loss is None else T.add(loss, term)
            loss = T.mul(loss, Tensor(1.0 / len(batch)))
            for p in model.params.values():
                p.zero_grad()
            T.backward(loss)
        except NumericalError as exc:
            raise NumericalError(
                f"training diverged at iteration {it}: {exc}"
            ) from exc
        lr = poly_lr(settings.lr, it, settings.iterations, settings.poly_power)
        adam_step(model.params, state, lr, settings.weight_decay)
        row = {"iteration": it, "loss": loss.item()}
        if (it + 1) % settings.eval_every == 0 and it + 1 < settings.iterations:
            report, val_loss = run_eval(it + 1)
            row.update(_metric_row(cfg.tasks, report))
            row["val_loss"] = val_loss
        history.append(row)

    final_report, final_val_loss = run_eval(settings.iterations)
    if history:
        history[-1].update(_metric_row(cfg.tasks, final_report))
        history[-1]["val_loss"] = final_val_loss
    return TrainResult(history, evals, final_report, final_val_loss,
                       best_iteration, model)


def _metric_row(tasks, report: MetricReport) -> dict:
    return {f"{t.name}_{_task_metric(t)}": report.values[t.name] for t in tasks}


def history_columns(tasks) -> list[str]:
    return ["iteration", "loss"] + [f"{t.name}_{_task_metric(t)}" for t in tasks] + ["val_loss"]


# ---------------------------------------------------------------------------
# ablations


ABLATION_KINDS = ("task_order", "scan_scale", "scan_number", "uni_vs_bi",
                  "mode_order", "components")


def _order_label(tasks, order) -> str:
    return "-".join(tasks[i].name[0].upper() for i in order)


def fixed_task_orders(n_tasks: int) -> list[tuple[int, ...]]:
    """Four deterministic arms: identity, rotate, reverse-rotate, swap-middle."""
    identity = tuple(range(n_tasks))
    if n_tasks < 2:
        return [identity]
    rot = tuple(list(identity[2:]) + list(identity[:2])) if n_tasks > 2 else identity
    rev_rot = tuple([identity[-1]] + list(identity[:-1]))
    swap = list(identity)
    swap[1], swap[2 % n_tasks] = swap[2 % n_tasks], swap[1]
    return [identity, rot, rev_rot, tuple(swap)]


def stl_reference(cfg: ModelConfig, train_samples, val_samples,
                  settings: TrainSettings, seed: int) -> MetricReport:
    """Train one single-task model per task and merge their metrics."""
    merged = MetricReport()
    for idx, task in enumerate(cfg.tasks):
        st_cfg = single_task_config(cfg, idx)
        result = train(st_cfg, train_samples, val_samples, settings, seed + 1000 + idx)
        merged.values[task.name] = result.final_report.values[task.name]
        merged.higher_better[task.name] = result.final_report.higher_better[task.name]
    return merged


def _run_arm(label: str, arm_cfg: ModelConfig, arm_settings: TrainSettings,
             train_samples, val_samples, seeds, stl: MetricReport | None,
             h: int, w: int) -> dict:
    from .model import count_flops, count_params

    per_task = {t.name: [] for t in arm_cfg.tasks}
    losses = []
    directions = {}
    for seed in seeds:
        result = train(arm_cfg, train_samples, val_samples, arm_settings, seed)
        for t in arm_cfg.tasks:
            per_task[t.name].append(result.final_report.values[t.name])
            directions[t.name] = result.final_report.higher_better[t.name]
        losses.append(result.final_val_loss)
    report = MetricReport({k: float(np.mean(v)) for k, v in per_task.items()},
                          directions)
    row = {"arm": label}
    row.update(report.values)
    row["val_loss"] = float(np.mean(losses))
    try:
        row["delta_m"] = mtl_gain(report, stl) if stl is not None else ""
    except MetricError:
        row["delta_m"] = ""
    row["flops"] = count_flops(arm_cfg, h, w)
    row["params"] = count_params(arm_cfg)
    return row


def run_ablation(kind: str, cfg: ModelConfig, train_samples, val_samples,
                 settings: TrainSettings, seeds=(0,),
                 stl: MetricReport | None = None,
                 max_workers: int = 1) -> list[dict]:
    """Train every arm of one ablation with a shared seed set, one row per arm.

    Arms are independent; `max_workers` > 1 runs them in separate processes
    (submission order preserved, so outputs stay deterministic).
    """
    if kind not in ABLATION_KINDS:
        raise ValueError(f"unsupported ablation kind '{kind}'")
    h, w = settings.crop_hw or train_samples[0].hw

    arms: list[tuple[str, ModelConfig, TrainSettings]] = []
    if kind == "task_order":
        for order in fixed_task_orders(cfg.n_tasks):
            arms.append((_order_label(cfg.tasks, order),
                         replace(cfg, task_order=order), settings))
        arms.append(("Random", cfg, replace(settings, random_task_order=True)))
    elif kind == "scan_scale":
        for s in (2, 3, 4):
            arms.append((f"{{1,{s}}}", replace(cfg, scan_scales=((1, s),) * 3), settings))
    elif kind == "scan_number":
        arms.append(("{1}", replace(cfg, scan_scales=((1,),) * 3), settings))
        arms.append(("{1,4}", replace(cfg, scan_scales=((1, 4),) * 3), settings))
        arms.append(("{1,2}/{1,2,4}/{1,2,4,6}",
                     replace(cfg, scan_scales=((1, 2), (1, 2, 4), (1, 2, 4, 6))),
                     settings))
    elif kind == "uni_vs_bi":
        arms.append(("Uni", replace(cfg, bidirectional=False), settings))
        arms.append(("Bi", replace(cfg, bidirectional=True), settings))
    elif kind == "mode_order":
        for mode in ("tf_only", "pf_only", "tf_then_pf", "pf_then_tf"):
            arms.append((mode, replace(cfg, mode_order=mode), settings))
    elif kind == "components":
        if stl is None:
            stl = stl_reference(cfg, train_samples, val_samples, settings, seeds[0])
        arms.append(("MTL", mtl_baseline_config(cfg), settings))
        arms.append(("BI-Scan", biscan_only_config(cfg), settings))
        arms.append(("MS-Scan", msscan_only_config(cfg), settings))
        arms.append(("BIM", cfg, settings))

    rows: list[dict] = []
    if kind == "components":
        rows.append({"arm": "STL", **dict(stl.values), "val_loss": "",
                     "delta_m": 0.0, "flops": "", "params": ""})
    jobs = [(label, arm_cfg, arm_settings, train_samples, val_samples, seeds,
             stl, h, w) for label, arm_cfg, arm_settings in arms]
    if max_workers > 1 and len(jobs) > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=max_workers) as pool:
            rows.extend(pool.map(_run_arm_star, jobs))
    else:
        rows.extend(_run_arm(*job) for job in jobs)
    return rows


def _run_arm_star(job):
    return _run_arm(*job)
