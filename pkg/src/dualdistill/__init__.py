"""Cross-modal attention distillation from a fusion-encoder teacher into a
dual-encoder student, on a from-scratch numpy autodiff core."""

__version__ = "0.1.0"
