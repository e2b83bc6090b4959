"""Exporter that runs a geometry foundation model plus an entity segmenter
over real images and writes a maskprior-conformant scene directory."""

__version__ = "0.1.0"
