"""Joint scan-CAD shape embedding at desk scale.

Binary 32^3 occupancy grids go in, a shared 256-d embedding space for
scan and CAD geometry comes out, along with the retrieval benchmark and
the annotation-collection service that produces ranked similarity data.
"""

__version__ = "0.1.0"
