"""Hierarchical voxel classification with per-branch heteroscedastic uncertainty."""

from .taxonomy import (
    AncestorPath,
    LabelTree,
    Node,
    SiblingGroup,
    ancestor_path,
    load_taxonomy,
    parse_taxonomy,
    project_map,
    project_to_level,
    serialize_taxonomy,
    sibling_groups,
)

__version__ = "0.1.0"
FORMAT_VERSION = 1

__all__ = [
    "AncestorPath",
    "LabelTree",
    "Node",
    "SiblingGroup",
    "ancestor_path",
    "load_taxonomy",
    "parse_taxonomy",
    "project_map",
    "project_to_level",
    "serialize_taxonomy",
    "sibling_groups",
    "FORMAT_VERSION",
]
