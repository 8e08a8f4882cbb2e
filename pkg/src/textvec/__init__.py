"""textvec: recover editable vector text parameters from raster images.

The pipeline renders a parametric text document (glyph atlas + fill/border/
shadow effects composited over a background), and inverts raster inputs back
into that parametric form by gradient-based refinement of a differentiable
reconstruction.
"""

__version__ = "0.1.0"
