"""Joint BEV LiDAR detection, tracking and motion forecasting, desk-scale."""

__version__ = "0.1.0"
