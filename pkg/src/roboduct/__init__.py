"""roboduct: desk-scale cloud-robotics communication stack.

Components: an in-process pub/sub message graph, a single-port websocket
bridge with path-routed isolation, outbound-only reconnecting duct clients,
a deterministic network impairment simulator, a differential-drive robot
traffic generator with real-time-factor metrics, and a GPU session
placement planner.
"""

__version__ = "0.1.0"
