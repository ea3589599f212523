"""Imperceptible adversarial perturbations for differentiable speech denoisers."""

__version__ = "0.1.0"
