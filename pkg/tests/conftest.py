import numpy as np
import pytest

from epiunwarp.distortion import (FieldMap, phantom_brain, phantom_fieldmap,
                                  simulate_distortion, vdm_from_fieldmap)
from epiunwarp.pipeline import preprocess


def build_phantom_case(seed, size=(64, 64), max_hz=40.0, bw_pe=13.62,
                       smoothness=8.0, field_seed_offset=10_000):
    """One simulated acquisition: preprocessed (t1w, distorted EPI), the
    generating displacement map, and the brain mask."""
    t1w, epi_truth, mask = phantom_brain(seed, size)
    fm = phantom_fieldmap(field_seed_offset + seed, size,
                          max_hz=max_hz, smoothness=smoothness)
    vdm = vdm_from_fieldmap(fm, bw_pe)
    distorted = simulate_distortion(epi_truth, vdm)
    epi_p, t1w_p = preprocess(distorted, t1w)
    return t1w_p, epi_p, vdm, mask


@pytest.fixture(scope="session")
def phantom_corpus_2d():
    return [build_phantom_case(seed) for seed in range(6)]
