"""Benchmark engine for class/domain correlation bias: skewed data, mitigation
strategies, inference-time de-biasing and fairness metrics."""

__version__ = "0.1.0"
