"""混合注意力桌面实验室包"""

__version__ = "0.1.0"
__description__ = "Desk-scale laboratory for RoPE / NoPE / QK-Norm / sliding-window hybrid attention"

__all__ = ["__version__", "__description__"]
