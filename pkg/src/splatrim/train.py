"""Fine-tuning and the iterative prune pipeline.

The pipeline starts from an already-optimized scene: alternate ``interval``
optimizer steps with a prune event for ``steps`` rounds, then run an
extended fine-tune. The one-shot variant scores every Gaussian with a
no-update gradient pass over all views, prunes once, and fine-tunes.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import Camera, GaussianSet, normalize_quaternions
from .errors import DivergedRunError, EmptySceneError, InvalidParameterError
from .metrics import LossConfig, psnr, training_loss
from .prune import (
    PruneCriterion,
    PruneReport,
    PruneSchedule,
    PruneStepRecord,
    apply_mask,
    mask_thresholds,
    prune_mask,
)
from .render import (
    GradientStats,
    RenderConfig,
    accumulate_gradient_stats,
    rasterize,
    rasterize_backward,
)

BACKGROUND = np.zeros(3)


@dataclass(frozen=True)
class OptimizerConfig:
    """Adam hyperparameters with per-group learning rates."""

    position_lr_init: float = 1.6e-4
    position_lr_final: float = 1.6e-6
    sh_dc_lr: float = 2.5e-3
    sh_rest_lr: float = 2.5e-3 / 20.0
    opacity_lr: float = 5e-2
    scale_lr: float = 5e-3
    rotation_lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-15


_GROUPS = ("positions", "rotations", "log_scales", "opacity_logits", "sh_coeffs")


@dataclass
class OptimizerState:
    """Adam moments, congruent with the scene and filtered jointly on prune."""

    config: OptimizerConfig
    total_steps: int
    step_count: int = 0
    moments1: dict = field(default_factory=dict)
    moments2: dict = field(default_factory=dict)

    @staticmethod
    def create(scene: GaussianSet, config: OptimizerConfig, total_steps: int) -> "OptimizerState":
        state = OptimizerState(config=config, total_steps=max(total_steps, 1))
        for name in _GROUPS:
            arr = getattr(scene, name)
            state.moments1[name] = np.zeros(arr.shape, np.float64)
            state.moments2[name] = np.zeros(arr.shape, np.float64)
        return state

    def position_lr(self) -> float:
        cfg = self.config
        if cfg.position_lr_init == 0.0:
            return 0.0
        frac = min(self.step_count / self.total_steps, 1.0)
        return cfg.position_lr_init * (cfg.position_lr_final / cfg.position_lr_init) ** frac

    def _group_lr(self, name: str, shape: tuple) -> np.ndarray | float:
        cfg = self.config
        if name == "positions":
            return self.position_lr()
        if name == "rotations":
            return cfg.rotation_lr
        if name == "log_scales":
            return cfg.scale_lr
        if name == "opacity_logits":
            return cfg.opacity_lr
        # SH: DC band at its own rate, higher bands slower.
        lr = np.full(shape, cfg.sh_rest_lr, np.float64)
        lr[:, 0, :] = cfg.sh_dc_lr
        return lr

    def step(self, scene: GaussianSet, grads) -> GaussianSet:
        """One Adam update in storage space; renormalizes quaternions.

        Parameter arrays whose update is identically zero are passed through
        untouched, so a zero-learning-rate step leaves the scene bit-exact.
        """
        self.step_count += 1
        cfg = self.config
        bias1 = 1.0 - cfg.beta1**self.step_count
        bias2 = 1.0 - cfg.beta2**self.step_count
        new_arrays = {}
        for name in _GROUPS:
            grad = getattr(grads, name)
            m = self.moments1[name]
            v = self.moments2[name]
            m *= cfg.beta1
            m += (1.0 - cfg.beta1) * grad
            v *= cfg.beta2
            v += (1.0 - cfg.beta2) * grad * grad
            lr = self._group_lr(name, m.shape)
            delta = lr * (m / bias1) / (np.sqrt(v / bias2) + cfg.eps)
            if not np.any(delta):
                continue
            updated = getattr(scene, name).astype(np.float64) - delta
            if name == "rotations":
                updated = normalize_quaternions(updated)
            new_arrays[name] = updated.astype(np.float32)
        if not new_arrays:
            return scene
        return scene.with_updates(**new_arrays)

    def filter(self, keep: np.ndarray) -> "OptimizerState":
        state = OptimizerState(
            config=self.config, total_steps=self.total_steps, step_count=self.step_count
        )
        state.moments1 = {k: v[keep] for k, v in self.moments1.items()}
        state.moments2 = {k: v[keep] for k, v in self.moments2.items()}
        return state


def load_run_config(path) -> dict[str, str]:
    """Flat key-value run configuration: one ``key value`` pair per line.

    Blank lines and ``#`` comments are ignored. Values stay strings; the
    consumer (CLI or caller) owns the typing.
    """
    from pathlib import Path

    config: dict[str, str] = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split(None, 1)
        if len(parts) != 2:
            raise InvalidParameterError(f"{path}:{lineno}: expected 'key value'")
        config[parts[0]] = parts[1].strip()
    return config


@dataclass
class HistoryEntry:
    iteration: int
    loss: float
    psnr: float
    count: int


@dataclass
class TrainRun:
    """Configuration and per-iteration record of one training run."""

    schedule: PruneSchedule
    loss_config: LossConfig
    seed: int
    dataset: list = field(default_factory=list, repr=False)  # (camera, target) pairs
    iteration: int = 0
    history: list[HistoryEntry] = field(default_factory=list)

    def log(self, loss: float, psnr_db: float, count: int) -> None:
        self.history.append(HistoryEntry(self.iteration, loss, psnr_db, count))


@dataclass
class FinetuneResult:
    scene: GaussianSet
    loss: float
    psnr: float
    grad_norms: np.ndarray       # ||dL/d mean2d|| per Gaussian
    param_grad_norms: np.ndarray  # norm over all 59 parameter gradients


def finetune_step(
    scene: GaussianSet,
    optimizer: OptimizerState,
    camera: Camera,
    target: np.ndarray,
    loss_cfg: LossConfig,
    render_cfg: RenderConfig | None = None,
    background: np.ndarray = BACKGROUND,
) -> FinetuneResult:
    """Render one view, take one optimizer step, return the gradient norms."""
    if scene.count == 0:
        raise InvalidParameterError("cannot fine-tune an empty scene")
    render_cfg = render_cfg or RenderConfig()
    out = rasterize(scene, camera, background, render_cfg)
    # divergence shows up as non-finite parameters poisoning the render
    if not np.all(np.isfinite(out.image)):
        raise DivergedRunError(optimizer.step_count + 1)
    loss, d_image = training_loss(out.image, target, loss_cfg)
    if not np.isfinite(loss):
        raise DivergedRunError(optimizer.step_count + 1)
    grads, norms = rasterize_backward(scene, camera, out, d_image)
    new_scene = optimizer.step(scene, grads)
    return FinetuneResult(
        scene=new_scene,
        loss=loss,
        psnr=psnr(out.image, target),
        grad_norms=norms,
        param_grad_norms=grads.per_gaussian_norms(),
    )


class _ViewCycler:
    """Cycles through dataset views, reshuffling each epoch with a seeded RNG."""

    def __init__(self, n_views: int, rng: np.random.Generator):
        self.n_views = n_views
        self.rng = rng
        self.order = []

    def next(self) -> int:
        if not self.order:
            self.order = list(self.rng.permutation(self.n_views))
        return int(self.order.pop(0))


def _statistic(result: FinetuneResult, schedule: PruneSchedule) -> np.ndarray:
    if schedule.grad_statistic == "param":
        return result.param_grad_norms
    return result.grad_norms


def _prune_event(
    scene: GaussianSet,
    optimizer: OptimizerState,
    stats: GradientStats,
    schedule: PruneSchedule,
    gamma_iter: float,
    report: PruneReport,
    iteration: int,
):
    opacities = scene.activated_opacities()
    scores = stats.scores(schedule.score_reduction)
    keep = prune_mask(opacities, scores, gamma_iter, schedule.criterion)
    if not np.any(keep):
        raise EmptySceneError(f"prune at iteration {iteration} would empty the scene")
    op_thr, gr_thr = mask_thresholds(opacities, scores, gamma_iter, schedule.criterion)
    report.add(
        PruneStepRecord(
            iteration=iteration,
            gamma_iter=gamma_iter,
            kept=int(keep.sum()),
            removed=int((~keep).sum()),
            opacity_threshold=op_thr,
            gradient_threshold=gr_thr,
        )
    )
    return apply_mask(scene, keep), optimizer.filter(keep), GradientStats.zeros(int(keep.sum()))


def run_iterative_prune(
    scene: GaussianSet,
    dataset: list[tuple[Camera, np.ndarray]],
    schedule: PruneSchedule,
    loss_cfg: LossConfig | None = None,
    opt_cfg: OptimizerConfig | None = None,
    seed: int = 0,
    render_cfg: RenderConfig | None = None,
) -> tuple[GaussianSet, PruneReport, TrainRun]:
    """Alternate fine-tuning with prune events, then an extended fine-tune."""
    if not dataset:
        raise InvalidParameterError("dataset is empty")
    loss_cfg = loss_cfg or LossConfig()
    opt_cfg = opt_cfg or OptimizerConfig()
    total = schedule.interval * schedule.steps + schedule.finetune_iters
    optimizer = OptimizerState.create(scene, opt_cfg, total)
    stats = GradientStats.zeros(scene.count)
    run = TrainRun(schedule=schedule, loss_config=loss_cfg, seed=seed, dataset=dataset)
    report = PruneReport(initial_count=scene.count)
    cycler = _ViewCycler(len(dataset), np.random.default_rng(seed))
    gamma_iter = schedule.gamma_iter

    for _ in range(schedule.steps):
        for _ in range(schedule.interval):
            camera, target = dataset[cycler.next()]
            result = finetune_step(
                scene, optimizer, camera, target, loss_cfg, render_cfg
            )
            scene = result.scene
            stats = accumulate_gradient_stats(stats, _statistic(result, schedule))
            run.iteration += 1
            run.log(result.loss, result.psnr, scene.count)
        scene, optimizer, stats = _prune_event(
            scene, optimizer, stats, schedule, gamma_iter, report, run.iteration
        )

    for _ in range(schedule.finetune_iters):
        camera, target = dataset[cycler.next()]
        result = finetune_step(scene, optimizer, camera, target, loss_cfg, render_cfg)
        scene = result.scene
        stats = accumulate_gradient_stats(stats, _statistic(result, schedule))
        run.iteration += 1
        run.log(result.loss, result.psnr, scene.count)

    return scene, report, run


def score_pass(
    scene: GaussianSet,
    dataset: list[tuple[Camera, np.ndarray]],
    schedule: PruneSchedule,
    loss_cfg: LossConfig,
    render_cfg: RenderConfig | None = None,
) -> GradientStats:
    """Gradient statistics from one backward pass per view, with no updates."""
    stats = GradientStats.zeros(scene.count)
    render_cfg = render_cfg or RenderConfig()
    for camera, target in dataset:
        out = rasterize(scene, camera, BACKGROUND, render_cfg)
        _, d_image = training_loss(out.image, target, loss_cfg)
        grads, norms = rasterize_backward(scene, camera, out, d_image)
        if schedule.grad_statistic == "param":
            stats = accumulate_gradient_stats(stats, grads.per_gaussian_norms())
        else:
            stats = accumulate_gradient_stats(stats, norms)
    return stats


def one_shot_prune(
    scene: GaussianSet,
    dataset: list[tuple[Camera, np.ndarray]],
    gamma: float,
    finetune_iters: int,
    criterion: PruneCriterion = PruneCriterion.GRADIENT_AWARE,
    loss_cfg: LossConfig | None = None,
    opt_cfg: OptimizerConfig | None = None,
    seed: int = 0,
    render_cfg: RenderConfig | None = None,
) -> tuple[GaussianSet, PruneReport, TrainRun]:
    """Prune the full target fraction in one event, then fine-tune."""
    if not dataset:
        raise InvalidParameterError("dataset is empty")
    loss_cfg = loss_cfg or LossConfig()
    opt_cfg = opt_cfg or OptimizerConfig()
    schedule = PruneSchedule(
        gamma_target=gamma, steps=1, interval=1, criterion=criterion,
        finetune_iters=finetune_iters,
    )
    run = TrainRun(schedule=schedule, loss_config=loss_cfg, seed=seed, dataset=dataset)
    report = PruneReport(initial_count=scene.count)

    stats = score_pass(scene, dataset, schedule, loss_cfg, render_cfg)
    optimizer = OptimizerState.create(scene, opt_cfg, max(finetune_iters, 1))
    scene, optimizer, _ = _prune_event(
        scene, optimizer, stats, schedule, gamma, report, 0
    )

    cycler = _ViewCycler(len(dataset), np.random.default_rng(seed))
    for _ in range(finetune_iters):
        camera, target = dataset[cycler.next()]
        result = finetune_step(scene, optimizer, camera, target, loss_cfg, render_cfg)
        scene = result.scene
        run.iteration += 1
        run.log(result.loss, result.psnr, scene.count)

    return scene, report, run


def finetune(
    scene: GaussianSet,
    dataset: list[tuple[Camera, np.ndarray]],
    iters: int,
    loss_cfg: LossConfig | None = None,
    opt_cfg: OptimizerConfig | None = None,
    seed: int = 0,
    render_cfg: RenderConfig | None = None,
) -> tuple[GaussianSet, TrainRun]:
    """Pure fine-tuning: the pipeline with no prune events."""
    if iters < 1:
        raise InvalidParameterError("iters must be >= 1")
    schedule = PruneSchedule(gamma_target=0.0, steps=1, interval=1, finetune_iters=iters - 1)
    scene, _, run = run_iterative_prune(
        scene, dataset, schedule, loss_cfg, opt_cfg, seed, render_cfg
    )
    return scene, run


def evaluate(
    scene: GaussianSet,
    dataset: list[tuple[Camera, np.ndarray]],
    loss_cfg: LossConfig | None = None,
    render_cfg: RenderConfig | None = None,
) -> dict:
    """Mean PSNR / SSIM of a scene against a set of views."""
    from .metrics import ssim as ssim_fn

    loss_cfg = loss_cfg or LossConfig()
    render_cfg = render_cfg or RenderConfig()
    psnrs, ssims = [], []
    for camera, target in dataset:
        out = rasterize(scene, camera, BACKGROUND, render_cfg)
        psnrs.append(psnr(out.image, target))
        ssims.append(ssim_fn(out.image, target, loss_cfg))
    return {"psnr": float(np.mean(psnrs)), "ssim": float(np.mean(ssims))}
