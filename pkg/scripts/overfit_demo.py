"""Memorise eight trajectories and decode them back; prints loss and worst point error."""
from threadpoolctl import threadpool_limits

from dualpark.experiments import OverfitConfig, run_overfit

if __name__ == "__main__":
    with threadpool_limits(1):
        res = run_overfit(OverfitConfig(), log=print)
    print(f"final loss {res.final_loss:.4f} after {res.steps} steps ({res.seconds:.0f} s)")
    print(f"worst decoded point error {res.max_point_error:.4f} m, bin width {res.bin_width:.4f} m, "
          f"lengths match: {res.lengths_match}")
