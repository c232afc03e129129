"""Cross-resolution neural encoding models.

Fine-tune a windowed feature network on slow brain-like responses, then
evaluate how its representations transfer to fast responses, with all
supporting numerics (cross-validated ridge, delay/lag embedding,
spectral SNR analysis, scaling fits) and a synthetic generator that
makes every claim testable at desk scale.
"""

__version__ = "0.1.0"
