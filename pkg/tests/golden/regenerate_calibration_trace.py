"""Rewrite calibration_trace.json from the current optimiser.

Only run this after a deliberate change to the calibration objective or the
simplex; the acceptance suite compares against the stored file byte for byte.
"""

import sys
from pathlib import Path

HERE = Path(__file__).resolve().parent
sys.path.insert(0, str(HERE.parent))

from bluelights.calibrate import calibrate  # noqa: E402
from test_acceptance import _calibration_corpus  # noqa: E402

if __name__ == "__main__":
    net, corpus = _calibration_corpus()
    _, report = calibrate(net, corpus)
    (HERE / "calibration_trace.json").write_text(report.dumps())
    print(f"{report.initial_objective:.4f} -> {report.final_objective:.4f} in {report.iterations} iterations")
