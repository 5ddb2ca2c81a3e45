"""Duffing data, the command-line tool and the shooting comparison.

A forced Duffing oscillator is integrated with RK4 and written to CSV.
The ``nllfr`` command then fits a linear initializer, identifies a model
and evaluates it, exactly as a shell user would. Finally a small scenario
comparison contrasts a guided start with a linear start under multiple
shooting.
"""
import json
import tempfile
from pathlib import Path

from nllfr import (PipelineConfig, ResidualSearchConfig, ShootingConfig, SyntheticSpec,
                   TrainConfig, compare_shooting, generate_synthetic)
from nllfr.cli import main

config = PipelineConfig(
    hidden=(8,), activation="tanh",
    search=ResidualSearchConfig(H=10, N0=100, lam=0.01, outer_iterations=10),
    train=TrainConfig(learning_rate=1e-2, iterations=500),
    shooting=ShootingConfig(d=1, max_iterations=20),
)

with tempfile.TemporaryDirectory() as tmp:
    tmp = Path(tmp)
    (tmp / "spec.json").write_text(json.dumps({"system": "duffing_cubic", "N": 1500,
                                               "rng_seed": 0}))
    (tmp / "config.json").write_text(json.dumps(config.to_dict()))
    main(["synth", str(tmp / "spec.json"), "--out", str(tmp / "duffing.csv")])
    main(["identify", str(tmp / "duffing.csv"), "--config", str(tmp / "config.json"),
          "--out", str(tmp / "run")])
    summary = json.loads((tmp / "run" / "summary.json").read_text())
    print("identify summary:", {k: summary[k] for k in sorted(summary)
                                if isinstance(summary[k], (int, float, str))})
    main(["evaluate", str(tmp / "run" / "model.json"), str(tmp / "duffing.csv"),
          "--discard", "50"])

data, _ = generate_synthetic(SyntheticSpec(N=1000, rng_seed=1))
runs = compare_shooting(data, config, 3, ("S1", "S3"))
for r in runs:
    tr = r["trace"]
    print(f"{r['scenario']} seed {r['seed']:>10}: NRMSE {tr[0]['nrmse']:.3f} % -> "
          f"{tr[-1]['nrmse']:.3f} %")
