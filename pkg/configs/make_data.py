"""Regenerate the bundled synthetic series under configs/data/."""

from pathlib import Path

from ensemblab.data_io import write_series
from ensemblab.ensemble_builder import synthetic_periodic_series

HERE = Path(__file__).parent / "data"

if __name__ == "__main__":
    HERE.mkdir(exist_ok=True)
    write_series(synthetic_periodic_series(50, 288, vol_ratio=4.0, seed=1), HERE / "periodic_50x288.csv")
    write_series(synthetic_periodic_series(50, 288, vol_ratio=1.0, seed=2), HERE / "homogeneous_50x288.csv")
