"""The batch pipeline end to end: config in, deterministic CSVs out.

Everything the library does is also reachable through the ``dadp``
command (here invoked in-process), driven by a JSON config.  The run
directory a subcommand leaves behind is the input of the next one, and
every artifact is byte-reproducible from (config, seed, version).

    dadp solve-joint    --config problem.json --out-dir joint/
    dadp solve-dadp     --config problem.json --out-dir run/
    dadp simulate run/  --config problem.json --out-dir sim/
    dadp price-compare run/ joint/ --config problem.json --out-dir cmp/
"""

import json
import tempfile
from pathlib import Path

from dadp.cli import main

config = {
    "schema": "dadp-config-1",
    "name": "pipeline-demo",
    "problem": {
        "units": [
            {
                "name": "dam",
                "kind": "storage",
                "initial_state": 6.0,
                "state_bounds": [0.0, 12.0],
                "control_bounds": [0.0, 3.0],
                "cost": {"c2": 0.05},
                "terminal": {"k": -3.0},
                "inflow_coordinate": 1,
            },
            {
                "name": "plant",
                "kind": "static",
                "control_bounds": [0.0, 6.0],
                "cost": {"c1": 1.0, "c2": 0.5},
            },
        ],
        "demand_coordinate": 0,
        "slack_unit": "plant",
    },
    "noise": {
        "kind": "bands",
        "demand": {"mean": [4.0, 4.5, 5.0, 4.5, 4.0], "spread": 1.0, "atoms": 2},
        "inflows": [{"coordinate": 1, "mean": [1.5] * 5, "spread": 0.5, "atoms": 2}],
    },
    "joint": {"state_grid": 25, "control_mesh": 9},
    "dadp": {
        "step_size": 0.2,
        "sample_count": 300,
        "stop_tol": 1e-4,
        "max_iters": 15,
        "lambda_grid_size": 13,
        "state_grid_size": [25, 1],
        "control_mesh_size": 13,
        "seed": 1,
    },
}

with tempfile.TemporaryDirectory() as tmp:
    root = Path(tmp)
    cfg = root / "problem.json"
    cfg.write_text(json.dumps(config, indent=2))

    for argv in (
        ["solve-joint", "--config", str(cfg), "--out-dir", str(root / "joint")],
        ["solve-dadp", "--config", str(cfg), "--out-dir", str(root / "run")],
        ["simulate", str(root / "run"), "--config", str(cfg),
         "--out-dir", str(root / "sim"), "--samples", "500"],
        ["price-compare", str(root / "run"), str(root / "joint"),
         "--config", str(cfg), "--out-dir", str(root / "cmp")],
    ):
        print(f"\n$ dadp {' '.join(argv)}")
        code = main(argv)
        assert code == 0, code

    print("\nrun directory contents:")
    for p in sorted((root / "run").iterdir()):
        print("  run/" + p.name)

    # manifests carry the headline numbers machine-readably
    for name in ("joint", "run", "sim", "cmp"):
        man = json.loads((root / name / "manifest.json").read_text())
        print(f"\n{name}/manifest.json results:")
        for key, val in man["results"].items():
            print(f"  {key}: {val}")
