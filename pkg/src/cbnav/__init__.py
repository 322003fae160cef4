"""Safe vehicle navigation from binary-labeled demonstrations.

Pipeline: expert data generation in two vehicle simulators, causal
transformer policy/world-model pretraining, barrier-critic training,
and deployment-time gradient rectification of unsafe actions.
"""

__version__ = "0.1.0"
