"""Tree-to-tree correction with a parent-sibling tree-convolution transformer."""

__version__ = "0.1.0"
