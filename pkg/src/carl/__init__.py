"""CubeSat survival digital twin, macro-action policy training, policy
sweep inspection, and telemetry shadow-inference bridge."""

__version__ = "0.1.0"
