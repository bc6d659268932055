"""Bilevel E(3)-equivariant transformer for molecular complexes.

The heavy lifting lives in the compiled extension; this package adds a few
dict-friendly helpers on top.
"""

import json as _json

from ._core import (
    ComplexGraph,
    Model,
    __version__,
    block_distance,
    complex_from_pdb,
    extract_interface,
    graph_to_json,
    metrics,
    parse_complex_json,
    run_cli,
    sample_complex,
    to_atom_level,
    to_block_level,
)

__all__ = [
    "ComplexGraph",
    "Model",
    "__version__",
    "audit",
    "block_distance",
    "complex_from_dict",
    "complex_from_pdb",
    "extract_interface",
    "graph_to_dict",
    "graph_to_json",
    "metrics",
    "parse_complex_json",
    "run_cli",
    "sample_complex",
    "to_atom_level",
    "to_block_level",
]


def complex_from_dict(data):
    """Build a graph from a canonical complex dict (see docs/formats.md)."""
    return parse_complex_json(_json.dumps(data))


def graph_to_dict(graph):
    """The canonical complex dict of a graph."""
    return _json.loads(graph_to_json(graph))


def audit(model, seed=0, trials=20, gradients=False):
    """Equivariance / permutation (and optionally gradient) checks as a dict."""
    return _json.loads(model.audit_json(seed=seed, trials=trials, gradients=gradients))
