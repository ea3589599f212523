"""Projected-gradient attacks under masking constraints.

The loop: forward through the victim on a tape, differentiable
intelligibility objective, gradient clip, Adam step, projection back into
the inaudible set. Projection scales each STFT bin's magnitude down to its
threshold (phase preserved); time-domain renders are re-analyzed and backed
off until the rendered waveform itself certifies feasible. Over-the-air
variants project onto the reverberated feasible set via iterative Wiener
deconvolution, hinge-loss descent, or both.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import diffdsp
from .autodiff import DiffValue, Tape
from .denoisers import DenoiserModel
from .dsp import (
    ComplexSpectrogram,
    PIPELINE_RATE,
    Rir,
    Waveform,
    convolve,
    istft,
    psd,
    stft,
)
from .masking import MaskingConfig, MaskingThresholds, apply_offset
from .metrics import StoiContext, stoi, stoi_diff_from_context
from .optim import Adam, clip_grad_norm

FEASIBILITY_TOL_DB = 1e-6
# violations at or below this are treated as already-feasible by the
# projection, which makes a second application bit-exact
_PROJECT_GUARD_DB = 1e-9
_BACKOFF_STEP_DB = 0.1
_MAX_BACKOFF_PASSES = 200

ITERATION_PRESETS = {"heavy": 20000, "medium": 10000, "light": 5000}


class NonConvergenceError(RuntimeError):
    """Raised when an over-the-air projection exhausts its step budget."""

    def __init__(self, residual: float, steps: int):
        super().__init__(
            f"projection failed to reach zero violation after {steps} steps "
            f"(residual {residual:.6g})"
        )
        self.residual = residual
        self.steps = steps


@dataclass
class AttackConfig:
    """Optimizer and objective settings for masked PGD.

    input_preservation_floor keeps the attacked input effectively identical
    to the unattacked one (stoi(x, x+delta) >= floor): iterates below the
    floor are never selected, and a hinge penalty of weight
    input_preservation_weight steers the optimizer back inside. Set the floor
    to None to run the unconstrained paper-style loop.
    """

    objective: str = "untargeted"  # untargeted | targeted
    iterations: int = 2000
    learning_rate: float = 0.01
    grad_clip_norm: float = 10.0
    lr_decay: float = 0.99
    lr_patience: int = 10
    masking: MaskingConfig = field(default_factory=MaskingConfig)
    parameterization: str = "time"  # time | spectrogram
    seed: int = 0
    input_preservation_floor: float | None = 0.98
    input_preservation_weight: float = 10.0
    input_preservation_margin: float = 0.005

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.objective not in ("untargeted", "targeted"):
            raise ValueError(f"unknown objective {self.objective!r}")
        if self.parameterization not in ("time", "spectrogram"):
            raise ValueError(f"unknown parameterization {self.parameterization!r}")


@dataclass
class OtaConfig:
    epsilon: float = 1e-4
    violation_offset_db: float = 1.0
    projection_method: str = "combined"  # wiener | gradient | combined
    start_offset_db: float = 0.0
    final_offset_db: float = 6.0
    schedule_fraction: float = 0.5
    projection_lr: float = 0.005
    projection_budget: int = 500
    wiener_budget: int = 50

    def __post_init__(self):
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if self.violation_offset_db <= 0:
            raise ValueError("violation offset must be positive")
        if self.final_offset_db < self.start_offset_db:
            raise ValueError("threshold schedule must tighten")
        if self.projection_method not in ("wiener", "gradient", "combined"):
            raise ValueError(f"unknown projection method {self.projection_method!r}")


@dataclass(frozen=True)
class FeasibilityCertificate:
    max_violation_db: float
    tolerance_db: float
    offset_db: float
    reverberated: bool

    @property
    def feasible(self) -> bool:
        return self.max_violation_db <= self.tolerance_db


@dataclass
class Perturbation:
    parameterization: str
    samples: np.ndarray  # rendered time-domain delta (post-normalization units)
    spec: np.ndarray | None  # complex params when spectrogram-parameterized
    thresholds: MaskingThresholds
    reverberated: bool
    certificate: FeasibilityCertificate

    def render(self) -> Waveform:
        return Waveform(self.samples, PIPELINE_RATE)


@dataclass
class AttackTrace:
    losses: np.ndarray
    feasible: np.ndarray
    learning_rates: np.ndarray
    best_iteration: int
    selected_iteration: int
    selection_rule: str
    wall_time_s: float
    final_metrics: dict = field(default_factory=dict)

    def to_csv(self) -> str:
        lines = ["iteration,loss,feasible,lr"]
        for i, (loss, ok, lr) in enumerate(
            zip(self.losses, self.feasible, self.learning_rates)
        ):
            lines.append(f"{i},{loss:.12g},{int(ok)},{lr:.12g}")
        return "\n".join(lines) + "\n"

    def summary(self) -> dict:
        return {
            "iterations": int(len(self.losses)),
            "best_iteration": int(self.best_iteration),
            "best_loss": float(self.losses[self.best_iteration]),
            "selected_iteration": int(self.selected_iteration),
            "selected_loss": float(self.losses[self.selected_iteration]),
            "selection_rule": self.selection_rule,
            "wall_time_s": self.wall_time_s,
            "final_metrics": self.final_metrics,
        }


# ---------------------------------------------------------------------------
# objectives
# ---------------------------------------------------------------------------


def untargeted_objective(out: DiffValue, clean_ctx: StoiContext) -> DiffValue:
    """Intelligibility of the model output vs the clean reference (minimized)."""
    return stoi_diff_from_context(clean_ctx, out)


def targeted_objective(
    out: DiffValue, clean_ctx: StoiContext, target_ctx: StoiContext
) -> DiffValue:
    """Clean-side minus target-side intelligibility (minimized)."""
    return ad.sub(
        stoi_diff_from_context(clean_ctx, out),
        stoi_diff_from_context(target_ctx, out),
    )


# ---------------------------------------------------------------------------
# projection
# ---------------------------------------------------------------------------


def max_violation_db(samples: np.ndarray, thresholds: MaskingThresholds) -> float:
    """Largest PSD excess over the thresholds, via the non-differentiable path."""
    spec = stft(Waveform(samples, thresholds.sample_rate), thresholds.params)
    excess = psd(spec).db - thresholds.theta
    return float(np.max(excess))


def project_spectrogram_data(
    data: np.ndarray, thresholds: MaskingThresholds, extra_db: float = 0.0
) -> np.ndarray:
    """Scale each bin's magnitude down to its threshold, preserving phase.

    Bins already within the threshold (up to a guard of 1e-9 dB) are returned
    bit-exactly unchanged, which makes the operation idempotent.
    """
    spec_db = psd(ComplexSpectrogram(data, thresholds.params)).db
    excess = spec_db - thresholds.theta
    scale = np.where(
        excess > _PROJECT_GUARD_DB, 10.0 ** (-(excess + extra_db) / 20.0), 1.0
    )
    return data * scale


def render_feasible(
    spec_data: np.ndarray,
    thresholds: MaskingThresholds,
    length: int,
) -> tuple[np.ndarray, np.ndarray, float]:
    """Project, render, and re-analyze until the rendered delta certifies.

    Overlap-add can re-violate bins after rendering; offending bins are backed
    off an extra 0.1 dB per pass until the re-analyzed PSD is clean.
    Returns (samples, analysis spectrogram, max violation dB).
    """
    params = thresholds.params
    data = project_spectrogram_data(spec_data, thresholds)
    wave = istft(ComplexSpectrogram(data, params), length)
    for _ in range(_MAX_BACKOFF_PASSES):
        analysis = stft(wave, params)
        viol = float(np.max(psd(analysis).db - thresholds.theta))
        if viol <= FEASIBILITY_TOL_DB:
            return wave.samples, analysis.data, viol
        data = project_spectrogram_data(analysis.data, thresholds, extra_db=_BACKOFF_STEP_DB)
        wave = istft(ComplexSpectrogram(data, params), length)
    raise NonConvergenceError(viol, _MAX_BACKOFF_PASSES)


def project_masking(delta: Perturbation, thresholds: MaskingThresholds) -> Perturbation:
    """Non-reverberated masking projection of a perturbation."""
    params = thresholds.params
    if delta.parameterization == "spectrogram":
        start = delta.spec if delta.spec is not None else stft(
            Waveform(delta.samples, thresholds.sample_rate), params
        ).data
    else:
        start = stft(Waveform(delta.samples, thresholds.sample_rate), params).data
    samples, spec_data, viol = render_feasible(start, thresholds, len(delta.samples))
    cert = FeasibilityCertificate(viol, FEASIBILITY_TOL_DB, thresholds.offset_db, False)
    return Perturbation(
        delta.parameterization,
        samples,
        spec_data if delta.parameterization == "spectrogram" else None,
        thresholds,
        False,
        cert,
    )


# ---------------------------------------------------------------------------
# PGD core
# ---------------------------------------------------------------------------


@dataclass
class _Scenario:
    x: np.ndarray
    x_wave: Waveform
    clean_ctx: StoiContext
    target_ctx: StoiContext | None
    x_ctx: StoiContext | None  # for the input-preservation penalty


def _build_scenarios(model, xs, cleans, targets, need_preservation):
    scenarios = []
    n = len(xs[0].samples)
    for x, clean, target in zip(xs, cleans, targets):
        if len(x) != n or len(clean) != n or (target is not None and len(target) != n):
            raise ValueError("all scenario waveforms must share one length")
        scenarios.append(
            _Scenario(
                x.samples,
                x,
                StoiContext(clean),
                StoiContext(target) if target is not None else None,
                StoiContext(x) if need_preservation else None,
            )
        )
    return scenarios


def _scenario_loss(
    model: DenoiserModel,
    scen: _Scenario,
    delta_state,
    parameterization,
    params,
    n,
    config: AttackConfig,
):
    """One forward pass; returns (tape, objective loss, total loss, leaves)."""
    tape = Tape()
    if parameterization == "time":
        leaf = tape.leaf(delta_state)
        leaves = [leaf]
        rendered = leaf
    else:
        re = tape.leaf(delta_state.real.copy())
        im = tape.leaf(delta_state.imag.copy())
        leaves = [re, im]
        rendered = diffdsp.istft_wave(re, im, params, n)
    model_in = ad.add(rendered, tape.constant(scen.x))
    out = model.forward_diff(tape, model_in)
    if scen.target_ctx is None:
        loss = untargeted_objective(out, scen.clean_ctx)
    else:
        loss = targeted_objective(out, scen.clean_ctx, scen.target_ctx)
    total = loss
    if scen.x_ctx is not None and config.input_preservation_weight > 0:
        target_level = config.input_preservation_floor + config.input_preservation_margin
        preservation = stoi_diff_from_context(scen.x_ctx, model_in)
        hinge = ad.clamp(
            ad.sub(tape.constant(target_level), preservation), lo=0.0
        )
        total = ad.add(loss, ad.mul(hinge, config.input_preservation_weight))
    return tape, loss, total, leaves


def _masked_pgd(
    model: DenoiserModel,
    scenarios: list[_Scenario],
    thresholds: MaskingThresholds,
    config: AttackConfig,
) -> tuple[Perturbation, AttackTrace]:
    t_start = time.monotonic()
    params = thresholds.params
    n = len(scenarios[0].x)
    adam = Adam(config.learning_rate)
    floor = config.input_preservation_floor

    if config.parameterization == "time":
        delta_samples = np.zeros(n)
        delta_state = delta_samples
    else:
        frames = params.frame_count(n)
        delta_spec = np.zeros((frames, params.bins), dtype=np.complex128)
        delta_samples = np.zeros(n)
        delta_state = delta_spec

    losses, feas, lrs = [], [], []
    best_loss = np.inf
    best_iter = -1
    best_snapshot = (delta_samples.copy(), None)
    streak = 0

    def preserved(samples: np.ndarray) -> bool:
        if floor is None:
            return True
        adv = samples
        for scen in scenarios:
            x_adv = Waveform(scen.x + adv, thresholds.sample_rate)
            if stoi(scen.x_wave, x_adv) < floor:
                return False
        return True

    for it in range(config.iterations):
        snapshot = (
            delta_samples.copy(),
            delta_state.copy() if config.parameterization == "spectrogram" else None,
        )
        viol = max_violation_db(delta_samples, thresholds)
        acceptable = viol <= FEASIBILITY_TOL_DB and preserved(delta_samples)
        iter_losses = []
        skipped = False
        for scen in scenarios:
            tape, loss, total, leaves = _scenario_loss(
                model, scen, delta_state, config.parameterization, params, n, config
            )
            loss_val = float(loss.data)
            iter_losses.append(loss_val)
            if not np.isfinite(loss_val) or not np.isfinite(total.data):
                skipped = True
                break
            tape.backward(total)
            grads = [
                leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)
                for leaf in leaves
            ]
            flat = np.concatenate([g.ravel() for g in grads])
            if not np.all(np.isfinite(flat)):
                skipped = True
                break
            flat = clip_grad_norm(flat, config.grad_clip_norm)
            if config.parameterization == "time":
                delta_state = delta_state - adam.update("delta", flat.reshape(n))
                spec_start = stft(Waveform(delta_state, thresholds.sample_rate), params).data
            else:
                shape = delta_state.shape
                size = delta_state.size
                step_re = adam.update("delta_re", flat[:size].reshape(shape))
                step_im = adam.update("delta_im", flat[size:].reshape(shape))
                delta_state = delta_state - (step_re + 1j * step_im)
                spec_start = delta_state
            delta_samples, analysis, _ = render_feasible(spec_start, thresholds, n)
            if config.parameterization == "time":
                delta_state = delta_samples
            else:
                delta_state = analysis

        mean_loss = float(np.mean(iter_losses)) if iter_losses else np.nan
        losses.append(mean_loss)
        feas.append(acceptable)
        lrs.append(adam.lr)

        if skipped or not np.isfinite(mean_loss):
            adam.lr *= config.lr_decay
            streak = 0
            continue
        if acceptable and mean_loss < best_loss:
            best_loss = mean_loss
            best_iter = it
            best_snapshot = snapshot
            streak = 0
        else:
            streak += 1
            if streak >= config.lr_patience:
                adam.lr *= config.lr_decay
                streak = 0

    if best_iter < 0:
        best_iter = 0
    best_samples, best_spec = best_snapshot
    viol = max_violation_db(best_samples, thresholds)
    cert = FeasibilityCertificate(viol, FEASIBILITY_TOL_DB, thresholds.offset_db, False)
    perturbation = Perturbation(
        config.parameterization, best_samples, best_spec, thresholds, False, cert
    )
    trace = AttackTrace(
        np.asarray(losses),
        np.asarray(feas, dtype=bool),
        np.asarray(lrs),
        best_iter,
        best_iter,
        "best-feasible-loss",
        time.monotonic() - t_start,
    )
    return perturbation, trace


def pgd_attack(
    model: DenoiserModel,
    x: Waveform,
    clean: Waveform,
    thresholds: MaskingThresholds,
    config: AttackConfig,
    target: Waveform | None = None,
) -> tuple[Perturbation, AttackTrace]:
    """Masked PGD on a single scenario; returns the best feasible iterate."""
    if config.objective == "targeted" and target is None:
        raise ValueError("targeted objective requires a target waveform")
    if config.objective == "untargeted":
        target = None
    need = config.input_preservation_floor is not None
    scenarios = _build_scenarios(model, [x], [clean], [target], need)
    return _masked_pgd(model, scenarios, thresholds, config)


def uap_attack(
    model: DenoiserModel,
    scenario_pairs: list[tuple[Waveform, Waveform]],
    shared_thresholds: MaskingThresholds,
    config: AttackConfig,
) -> tuple[Perturbation, AttackTrace]:
    """One shared perturbation trained sequentially across scenarios.

    shared_thresholds should be the element-wise minimum of the per-scenario
    thresholds, so feasibility holds for every member.
    """
    if not scenario_pairs:
        raise ValueError("no scenarios")
    xs = [p[0] for p in scenario_pairs]
    cleans = [p[1] for p in scenario_pairs]
    need = config.input_preservation_floor is not None
    scenarios = _build_scenarios(model, xs, cleans, [None] * len(xs), need)
    return _masked_pgd(model, scenarios, shared_thresholds, config)


# ---------------------------------------------------------------------------
# over-the-air machinery
# ---------------------------------------------------------------------------


def wiener_deconvolve(delta_r: Waveform, rir: Rir, epsilon: float = 1e-4) -> Waveform:
    """Regularized spectral division: approximately invert r * delta = delta_r."""
    if delta_r.sample_rate != rir.sample_rate:
        raise ValueError("sample-rate mismatch")
    n = len(delta_r)
    d = np.fft.rfft(delta_r.samples, n)
    r = np.fft.rfft(rir.taps, n)
    out = np.fft.irfft(d * np.conj(r) / (np.abs(r) ** 2 + epsilon), n)
    return Waveform(out, delta_r.sample_rate)


def _reverberated_violation(
    samples: np.ndarray, rir: Rir, thresholds: MaskingThresholds
) -> float:
    conv = convolve(Waveform(samples, thresholds.sample_rate), rir)
    return max_violation_db(conv.samples, thresholds)


def constraint_violation_graph(
    tape: Tape,
    re: DiffValue,
    im: DiffValue,
    rir: Rir,
    thresholds: MaskingThresholds,
    margin_db: float,
    length: int,
) -> DiffValue:
    """Hinge sum of PSD(r * render(delta)) above (theta - margin)."""
    params = thresholds.params
    wave = diffdsp.istft_wave(re, im, params, length)
    conv_full = ad.conv1d_full(wave, rir.taps)
    conv_n = ad.slice1d(conv_full, 0, length)
    re_c, im_c = diffdsp.stft_pair(conv_n, params)
    psd_grid = diffdsp.psd_db(re_c, im_c, params)
    limit = tape.constant(thresholds.theta - margin_db)
    return ad.sum_all(ad.clamp(ad.sub(psd_grid, limit), lo=0.0))


def constraint_violation(
    delta: Perturbation,
    rir: Rir,
    thresholds: MaskingThresholds,
    margin_db: float = 1.0,
) -> DiffValue:
    """Total reverberated constraint violation of a perturbation, on a tape."""
    params = thresholds.params
    if delta.spec is not None:
        spec = delta.spec
    else:
        spec = stft(Waveform(delta.samples, thresholds.sample_rate), params).data
    tape = Tape()
    re = tape.leaf(spec.real.copy())
    im = tape.leaf(spec.imag.copy())
    return constraint_violation_graph(
        tape, re, im, rir, thresholds, margin_db, len(delta.samples)
    )


def _ota_project_spec(
    spec_data: np.ndarray,
    rir: Rir,
    thresholds: MaskingThresholds,
    config: OtaConfig,
    length: int,
) -> tuple[np.ndarray, np.ndarray, float]:
    """Project spectrogram params onto the reverberated feasible set.

    Returns (samples, spec params, max reverberated violation dB).
    """
    params = thresholds.params

    if rir.is_identity():
        samples, analysis, viol = render_feasible(spec_data, thresholds, length)
        return samples, analysis, viol

    def rendered(data):
        return istft(ComplexSpectrogram(data, params), length).samples

    method = config.projection_method
    data = spec_data
    if method in ("wiener", "combined"):
        passes = config.wiener_budget if method == "wiener" else 1
        for _ in range(passes):
            samples = rendered(data)
            conv = convolve(Waveform(samples, thresholds.sample_rate), rir)
            viol = max_violation_db(conv.samples, thresholds)
            if viol <= FEASIBILITY_TOL_DB:
                return samples, data, viol
            feasible_r, _, _ = render_feasible(
                stft(conv, params).data, thresholds, length
            )
            back = wiener_deconvolve(
                Waveform(feasible_r, thresholds.sample_rate), rir, config.epsilon
            )
            data = stft(back, params).data
        if method == "wiener":
            samples = rendered(data)
            viol = _reverberated_violation(samples, rir, thresholds)
            if viol <= FEASIBILITY_TOL_DB:
                return samples, data, viol
            raise NonConvergenceError(viol, config.wiener_budget)

    # gradient descent on the hinge violation with a strict margin
    adam = Adam(config.projection_lr)
    re_data = data.real.copy()
    im_data = data.imag.copy()
    for step in range(config.projection_budget):
        tape = Tape()
        re = tape.leaf(re_data)
        im = tape.leaf(im_data)
        g = constraint_violation_graph(
            tape, re, im, rir, thresholds, config.violation_offset_db, length
        )
        if float(g.data) == 0.0:
            samples = rendered(re_data + 1j * im_data)
            viol = _reverberated_violation(samples, rir, thresholds)
            return samples, re_data + 1j * im_data, viol
        tape.backward(g)
        re_data = re_data - adam.update("re", re.grad)
        im_data = im_data - adam.update("im", im.grad)
    raise NonConvergenceError(float(g.data), config.projection_budget)


def ota_project(
    delta: Perturbation,
    rir: Rir,
    thresholds: MaskingThresholds,
    config: OtaConfig | None = None,
) -> Perturbation:
    """Find a perturbation whose reverberation satisfies the thresholds."""
    if config is None:
        config = OtaConfig()
    params = thresholds.params
    if delta.spec is not None:
        spec = delta.spec
    else:
        spec = stft(Waveform(delta.samples, thresholds.sample_rate), params).data
    samples, spec_out, viol = _ota_project_spec(
        spec, rir, thresholds, config, len(delta.samples)
    )
    cert = FeasibilityCertificate(viol, FEASIBILITY_TOL_DB, thresholds.offset_db, True)
    return Perturbation("spectrogram", samples, spec_out, thresholds, True, cert)


def ota_attack(
    model: DenoiserModel,
    y: Waveform,
    b: Waveform | None,
    rir: Rir,
    config: AttackConfig,
    ota: OtaConfig | None = None,
    target: Waveform | None = None,
) -> tuple[Perturbation, AttackTrace]:
    """Attack where the perturbation itself passes through the room response.

    Thresholds come from the reverberated mixture; the offset tightens along
    the configured schedule, and the final iterate (not the best-loss one) is
    returned because earlier iterates may violate the final thresholds.
    """
    if ota is None:
        ota = OtaConfig()
    t_start = time.monotonic()
    n = len(y)
    mix = y.samples if b is None else y.samples + b.samples
    x_conv = convolve(Waveform(mix, y.sample_rate), rir)

    from .masking import compute_thresholds

    base = compute_thresholds(
        x_conv,
        MaskingConfig(
            offset_db=0.0,
            temporal=config.masking.temporal,
            include_temporal=config.masking.include_temporal,
        ),
    )
    params = base.params
    clean_ctx = StoiContext(y)
    target_ctx = StoiContext(target) if target is not None else None
    x_base = x_conv.samples

    frames = params.frame_count(n)
    spec_state = np.zeros((frames, params.bins), dtype=np.complex128)
    delta_samples = np.zeros(n)
    adam = Adam(config.learning_rate)
    losses, feas, lrs = [], [], []
    best_loss, best_iter = np.inf, -1
    streak = 0
    ramp = max(1, int(np.ceil(config.iterations * ota.schedule_fraction)))

    for it in range(config.iterations):
        frac = min(1.0, it / ramp)
        offset = ota.start_offset_db + frac * (ota.final_offset_db - ota.start_offset_db)
        theta_t = apply_offset(base, offset)

        tape = Tape()
        re = tape.leaf(spec_state.real.copy())
        im = tape.leaf(spec_state.imag.copy())
        wave = diffdsp.istft_wave(re, im, params, n)
        conv_delta = ad.slice1d(ad.conv1d_full(wave, rir.taps), 0, n)
        model_in = ad.add(conv_delta, tape.constant(x_base))
        out = model.forward_diff(tape, model_in)
        if target_ctx is None:
            loss = untargeted_objective(out, clean_ctx)
        else:
            loss = targeted_objective(out, clean_ctx, target_ctx)
        loss_val = float(loss.data)
        viol = _reverberated_violation(delta_samples, rir, theta_t)
        losses.append(loss_val)
        feas.append(viol <= FEASIBILITY_TOL_DB)
        lrs.append(adam.lr)

        if not np.isfinite(loss_val):
            adam.lr *= config.lr_decay
            streak = 0
            continue
        tape.backward(loss)
        flat = np.concatenate([re.grad.ravel(), im.grad.ravel()])
        if not np.all(np.isfinite(flat)):
            adam.lr *= config.lr_decay
            streak = 0
            continue
        flat = clip_grad_norm(flat, config.grad_clip_norm)
        size = spec_state.size
        shape = spec_state.shape
        step = adam.update("re", flat[:size].reshape(shape)) + 1j * adam.update(
            "im", flat[size:].reshape(shape)
        )
        spec_state = spec_state - step
        delta_samples, spec_state, _ = _ota_project_spec(
            spec_state, rir, theta_t, ota, n
        )

        if loss_val < best_loss:
            best_loss = loss_val
            best_iter = it
            streak = 0
        else:
            streak += 1
            if streak >= config.lr_patience:
                adam.lr *= config.lr_decay
                streak = 0

    final_theta = apply_offset(base, ota.final_offset_db)
    viol = _reverberated_violation(delta_samples, rir, final_theta)
    cert = FeasibilityCertificate(
        viol, FEASIBILITY_TOL_DB, final_theta.offset_db, True
    )
    perturbation = Perturbation(
        "spectrogram", delta_samples, spec_state, final_theta, True, cert
    )
    trace = AttackTrace(
        np.asarray(losses),
        np.asarray(feas, dtype=bool),
        np.asarray(lrs),
        best_iter if best_iter >= 0 else config.iterations - 1,
        config.iterations - 1,
        "final-iterate",
        time.monotonic() - t_start,
    )
    return perturbation, trace
