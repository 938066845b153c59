"""Pytest bootstrap: runs before any test module is collected/imported.

`config.py` builds a module-level `settings = Settings()` singleton the moment
it is first imported, so reproducibility switches must be in the environment
before collection. Tests always run deterministically and serially, with
Haystack telemetry off and artifacts kept out of the working tree.
"""

import os
import tempfile

os.environ.setdefault("PRISE_DETERMINISTIC", "1")
os.environ.setdefault("HAYSTACK_TELEMETRY_ENABLED", "False")
for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")
os.environ.setdefault("PRISE_ARTIFACT_DIR", os.path.join(tempfile.gettempdir(), "prise-test-runs"))
