"""Hash-only distributable identity database.

Heavy pieces (numpy kernels, servers) are imported from their submodules;
this top level only re-exports the record model.
"""

from .core import (
    DidbRecord,
    IdentityFields,
    canonicalize,
    derive_prefix,
    make_record,
    parse_record,
    truncated_sha256,
)

__version__ = "0.1.0"

__all__ = [
    "DidbRecord",
    "IdentityFields",
    "canonicalize",
    "derive_prefix",
    "make_record",
    "parse_record",
    "truncated_sha256",
]
