"""Sorting-activated deep factor engine for cross-sectional asset pricing.

Builds tradable long-short factors from lagged firm characteristics and
macro predictors through a per-firm network whose output is quantile
sorted into value-weighted portfolios, trains the whole stack to shrink
cross-sectional pricing errors against a benchmark factor model, and
evaluates pricing out of sample.
"""

__version__ = "0.1.0"
