from editflow.alignment import align_optimal, align_pad_right, align_worst_case
from editflow.paths import Scheduler
from editflow.suites import (
    cfg_identities_suite,
    corrector_suite,
    kfe_suite,
    lemmas_suite,
    propagation_suite,
    theorem1_suite,
    transport_suite,
)


coupling_mapping = {
    "optimal": align_optimal,
    "pad_right": align_pad_right,
    "worst_case": align_worst_case,
}

scheduler_mapping = {
    "linear": Scheduler("linear"),
    "cubic": Scheduler("cubic"),
}

# transport is the slowest; it is only run when asked for by name
suite_mapping = {
    "kfe": kfe_suite,
    "theorem1": theorem1_suite,
    "lemmas": lemmas_suite,
    "propagation": propagation_suite,
    "corrector": corrector_suite,
    "cfg-identities": cfg_identities_suite,
    "transport": transport_suite,
}

DEFAULT_SUITES = ("kfe", "theorem1", "lemmas", "propagation", "corrector", "cfg-identities")
