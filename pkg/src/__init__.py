"""MU-MIMO grouping and QoE-constrained video streaming simulator."""
