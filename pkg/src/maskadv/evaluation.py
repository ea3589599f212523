"""Scenario construction, attack evaluation, defense, and transfer matrices."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .attack import AttackConfig, Perturbation, pgd_attack
from .denoisers import DenoiserModel
from .dsp import PIPELINE_RATE, Rir, Waveform, mix_at_snr, synth_test_signal
from .masking import MaskingConfig, MaskingThresholds, compute_thresholds
from .metrics import snr_db, stoi

SNR_CAP_SENTINEL = 1e9  # defense snr meaning "no defense"


class InfeasiblePerturbationError(RuntimeError):
    """A perturbation failed its feasibility certificate re-check."""


@dataclass(frozen=True)
class Scenario:
    """Recipe for one evaluation input: clean + noises (+ rir) at a target SNR."""

    clean: Waveform
    noises: list[Waveform]
    snr_db: float
    rir: Rir | None = None
    seed: int = 0

    def __post_init__(self):
        if not (-10.0 <= self.snr_db <= 70.0) and self.noises:
            raise ValueError("snr_db must lie in [-10, 70]")


def synthetic_scenario(
    seed: int,
    snr_db: float = 5.0,
    seconds: float = 2.0,
    noise_count: int = 5,
    rir: Rir | None = None,
) -> Scenario:
    """Deterministic scenario from the synthetic corpus."""
    rng = np.random.default_rng([seed, 77])
    clean = synth_test_signal("harmonic-voice", seconds, int(rng.integers(2**31)))
    noises = []
    for k in range(noise_count):
        kind = "white" if k % 2 == 0 else "babble"
        nz = synth_test_signal(kind, seconds, int(rng.integers(2**31)))
        # peak-align components, then apply a seeded circular offset
        shifted = np.roll(nz.samples, int(rng.integers(len(nz))))
        noises.append(Waveform(shifted, nz.sample_rate))
    return Scenario(clean, noises, snr_db, rir, seed)


def build_scenario(
    scenario: Scenario, masking_config: MaskingConfig | None = None
) -> tuple[Waveform, Waveform, MaskingThresholds]:
    """Mix the scenario and compute its masking thresholds.

    Returns (x, reference, thresholds); the reference is the unreverberated
    clean signal.
    """
    x, _ = mix_at_snr(scenario.clean, scenario.noises, scenario.snr_db, scenario.rir)
    theta = compute_thresholds(x, masking_config)
    return x, scenario.clean, theta


@dataclass
class EvaluationReport:
    input_stoi: float
    output_stoi: float
    stoi_enhancement: float
    perturbation_snr_db: float | None
    input_preservation_stoi: float | None
    max_violation_db: float | None
    model_name: str
    config_echo: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        return {
            "input_stoi": self.input_stoi,
            "output_stoi": self.output_stoi,
            "stoi_enhancement": self.stoi_enhancement,
            "perturbation_snr_db": self.perturbation_snr_db,
            "input_preservation_stoi": self.input_preservation_stoi,
            "max_violation_db": self.max_violation_db,
            "model": self.model_name,
            **({"config": self.config_echo} if self.config_echo else {}),
        }


def _verify_certificate(delta: Perturbation) -> float:
    from .attack import FEASIBILITY_TOL_DB, max_violation_db
    from .dsp import convolve

    if delta.reverberated:
        viol = delta.certificate.max_violation_db
    else:
        viol = max_violation_db(delta.samples, delta.thresholds)
    if viol > FEASIBILITY_TOL_DB:
        raise InfeasiblePerturbationError(
            f"perturbation violates its thresholds by {viol:.6g} dB"
        )
    return viol


def evaluate(
    model: DenoiserModel,
    x: Waveform,
    reference: Waveform,
    delta: Perturbation | None = None,
) -> EvaluationReport:
    """Run the model on x (+ rendered perturbation) and report enhancement."""
    if delta is not None:
        viol = _verify_certificate(delta)
        model_in = Waveform(x.samples + delta.samples, x.sample_rate)
        pert_snr = snr_db(x, model_in)
        preservation = stoi(x, model_in)
    else:
        viol = None
        model_in = x
        pert_snr = None
        preservation = None
    out = model.forward(model_in)
    input_stoi = stoi(reference, model_in)
    output_stoi = stoi(reference, out)
    return EvaluationReport(
        input_stoi=input_stoi,
        output_stoi=output_stoi,
        stoi_enhancement=output_stoi - input_stoi,
        perturbation_snr_db=pert_snr,
        input_preservation_stoi=preservation,
        max_violation_db=viol,
        model_name=model.name,
    )


@dataclass
class TargetedReport:
    input_side: float  # stoi(target, input) - stoi(clean, input)
    output_side: float  # stoi(target, output) - stoi(clean, output)
    model_name: str

    def as_dict(self) -> dict:
        return {
            "input_side_relative_stoi": self.input_side,
            "output_side_relative_stoi": self.output_side,
            "model": self.model_name,
        }


def evaluate_targeted(
    model: DenoiserModel,
    x: Waveform,
    clean: Waveform,
    target: Waveform,
    delta: Perturbation | None = None,
) -> TargetedReport:
    """Relative intelligibility of target vs clean, input-side and output-side."""
    if delta is not None:
        _verify_certificate(delta)
        model_in = Waveform(x.samples + delta.samples, x.sample_rate)
    else:
        model_in = x
    out = model.forward(model_in)
    return TargetedReport(
        input_side=stoi(target, model_in) - stoi(clean, model_in),
        output_side=stoi(target, out) - stoi(clean, out),
        model_name=model.name,
    )


@dataclass(frozen=True)
class DefenseConfig:
    snr_grid_db: tuple = (40.0, 30.0, 20.0, 10.0, 0.0)
    seed: int = 0

    def __post_init__(self):
        if not all(np.isfinite(self.snr_grid_db)):
            raise ValueError("defense snr grid must be finite")


def gaussian_defense(x_adv: Waveform, defense_snr_db: float, seed: int) -> Waveform:
    """Add white Gaussian noise at the requested SNR (deterministic per seed)."""
    if defense_snr_db >= SNR_CAP_SENTINEL:
        return x_adv
    rng = np.random.default_rng(seed)
    noise = rng.standard_normal(len(x_adv))
    power = float(np.mean(x_adv.samples**2))
    scale = np.sqrt(power / 10.0 ** (defense_snr_db / 10.0))
    noise *= scale / np.sqrt(np.mean(noise**2))
    return Waveform(np.clip(x_adv.samples + noise, -1.0, 1.0), x_adv.sample_rate)


def defense_sweep(
    model: DenoiserModel,
    x: Waveform,
    reference: Waveform,
    delta: Perturbation,
    config: DefenseConfig,
) -> dict[float, EvaluationReport]:
    """Evaluate the attacked input after Gaussian defense at each grid SNR."""
    _verify_certificate(delta)
    x_adv = Waveform(x.samples + delta.samples, x.sample_rate)
    reports: dict[float, EvaluationReport] = {}
    for snr in config.snr_grid_db:
        defended = gaussian_defense(x_adv, snr, config.seed)
        out = model.forward(defended)
        input_stoi = stoi(reference, defended)
        output_stoi = stoi(reference, out)
        reports[snr] = EvaluationReport(
            input_stoi=input_stoi,
            output_stoi=output_stoi,
            stoi_enhancement=output_stoi - input_stoi,
            perturbation_snr_db=None,
            input_preservation_stoi=None,
            max_violation_db=None,
            model_name=model.name,
        )
    return reports


@dataclass
class TransferMatrix:
    model_names: list[str]
    enhancement: np.ndarray  # rows: trained on, cols: evaluated on

    def to_csv(self) -> str:
        header = "trained_on," + ",".join(self.model_names)
        lines = [header]
        for name, row in zip(self.model_names, self.enhancement):
            lines.append(name + "," + ",".join(f"{v:.6f}" for v in row))
        return "\n".join(lines) + "\n"


def transfer_matrix(
    models: list[DenoiserModel],
    scenarios: list[Scenario],
    config: AttackConfig,
    masking_config: MaskingConfig | None = None,
) -> TransferMatrix:
    """Attack each row model per scenario; evaluate the deltas on all columns."""
    if not models:
        raise ValueError("no models")
    n_models = len(models)
    sums = np.zeros((n_models, n_models))
    for scenario in scenarios:
        x, reference, theta = build_scenario(scenario, masking_config)
        for i, attacker_model in enumerate(models):
            delta, _ = pgd_attack(attacker_model, x, reference, theta, config)
            for j, victim in enumerate(models):
                report = evaluate(victim, x, reference, delta)
                sums[i, j] += report.stoi_enhancement
    return TransferMatrix([m.name for m in models], sums / len(scenarios))
