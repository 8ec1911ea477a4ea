"""Shared fixtures: one small synthetic cohort and one finished run.

The session-scoped run is read-only; tests that mutate the work tree
(forcing stages, deleting outputs, changing config) build their own
cohort through `build_cohort` instead.
"""

from pathlib import Path
from typing import Sequence

import pytest

from histotype.config import load_config
from histotype.pipeline import PipelineContext, run_all
from histotype.synthetic import (SynthCohort, SynthConfig,
                                 generate_synthetic_cohort)


def build_cohort(root: Path, **kwargs) -> SynthCohort:
    params = dict(out_dir=root, wsis_per_class=4, seed=7,
                  wsi_width=128, wsi_height=96)
    params.update(kwargs)
    return generate_synthetic_cohort(SynthConfig(**params))


def context_for(cohort: SynthCohort | Path,
                overrides: Sequence[str] = ()) -> PipelineContext:
    config_path = Path(getattr(cohort, "config_path", cohort))
    config = load_config(config_path, list(overrides))
    text = config_path.read_text(encoding="utf-8")
    return PipelineContext.from_config(config, text, tuple(overrides))


@pytest.fixture(scope="session")
def cohort(tmp_path_factory) -> SynthCohort:
    return build_cohort(tmp_path_factory.mktemp("cohort"))


@pytest.fixture(scope="session")
def completed(cohort) -> PipelineContext:
    ctx = context_for(cohort)
    run_all(ctx)
    return ctx
