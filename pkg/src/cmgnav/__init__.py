"""Cross-modal grounding navigator with alternate adversarial training on synthetic graphs."""

__version__ = "0.1.0"
