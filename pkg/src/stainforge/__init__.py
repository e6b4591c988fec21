"""Prompt-guided unpaired virtual staining at desk scale.

Stain order is fixed everywhere: H&E, MAS, PAS, PASM.
"""

__version__ = "0.1.0"

STAINS = ("H&E", "MAS", "PAS", "PASM")
STAIN_KEYS = ("he", "mas", "pas", "pasm")

TASKS = {
    "H&E2MAS": ("H&E", "MAS"),
    "H&E2PAS": ("H&E", "PAS"),
    "H&E2PASM": ("H&E", "PASM"),
}


def stain_index(name: str) -> int:
    """Index of a stain given its display name or file key."""
    from .errors import InputError

    if name in STAINS:
        return STAINS.index(name)
    key = name.lower()
    if key in STAIN_KEYS:
        return STAIN_KEYS.index(key)
    raise InputError(f"unknown stain {name!r}; expected one of {STAINS}")
