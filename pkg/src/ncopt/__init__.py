"""Pointer-network policies trained with policy gradients for TSP and 0-1 knapsack,
with exact classical oracles for verification."""

__version__ = "0.1.0"
