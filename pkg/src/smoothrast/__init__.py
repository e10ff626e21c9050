"""Smooth differentiable triangle rasterization and render-and-compare mesh optimization."""
