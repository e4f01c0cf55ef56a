"""Plan an expert reverse bay park and track it with the closed-loop controller.

Writes the controller trace to results/bay_park_trace.csv.
"""
import math
from pathlib import Path

from dualpark.control import simulate_parking
from dualpark.synth import bay_scenario, plan_expert

ROOT = Path(__file__).resolve().parents[1]

if __name__ == "__main__":
    traj = plan_expert(bay_scenario())
    res = simulate_parking(traj.xy)
    (ROOT / "results").mkdir(exist_ok=True)
    res.write_csv(ROOT / "results" / "bay_park_trace.csv")
    print(f"converged: {res.converged} in {res.trace[-1, 0]:.1f} s")
    print(f"final position error {res.position_error:.3f} m, heading error {math.degrees(res.heading_error):.2f} deg")
