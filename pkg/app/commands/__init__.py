from app.commands import fit, loo, psis, simulate, theory

__all__ = [
    "fit",
    "loo",
    "psis",
    "simulate",
    "theory",
]
