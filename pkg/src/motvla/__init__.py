"""Toy driving vision-language-action model with per-group transformer experts.

Understanding, perception and action tokens share masked joint attention
while each group keeps its own projections, feed-forward and norms.  The
package runs on numpy with its own reverse-mode autodiff.
"""
__version__ = "0.1.0"
