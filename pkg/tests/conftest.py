import numpy as np
import pytest

from landcast.dataset import CohortSubject, LandmarkCohort
from landcast.simgen import marker_names


def cohort_from_generated(gen, t_lm=4.0, t_hor=3.0):
    """Wrap a GeneratedCohort into the LandmarkCohort the pipeline consumes."""
    subjects = []
    for rec in gen.survival:
        history = {m: gen.longitudinal.get(rec.subject_id, m) for m in marker_names()}
        capped = int(rec.event == 1 and rec.t_obs < t_lm + t_hor)
        subjects.append(
            CohortSubject(rec.subject_id, rec.t_obs, rec.event, capped, rec.covariates, history)
        )
    return LandmarkCohort(
        t_lm,
        t_hor,
        subjects,
        {m: "continuous" for m in marker_names()},
        sorted(gen.survival[0].covariates),
    )


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def informative_survival(n=200, seed=1, beta=1.5, cens_scale=2.0):
    """Simple PH data with one informative column, for learner sanity checks."""
    r = np.random.default_rng(seed)
    X = r.normal(size=(n, 5))
    lp = beta * X[:, 0]
    t_event = r.exponential(np.exp(-lp))
    t_cens = r.exponential(cens_scale, n)
    times = np.minimum(t_event, t_cens)
    events = (t_event <= t_cens).astype(int)
    return X, times, events
