import numpy as np
import pytest

from asdgat.connectome import BrainGraph, build_graph, default_region_names, node_features, pearson_matrix
from asdgat.ingest import SyntheticCohortSpec, generate_synthetic_cohort, preprocess


def cohort_graphs(spec: SyntheticCohortSpec, threshold: float = 0.2) -> list[BrainGraph]:
    manifest, series = generate_synthetic_cohort(spec)
    names = default_region_names(spec.n_regions)
    graphs = []
    for s in manifest.subjects:
        ts = preprocess(series[s.id])
        conn = pearson_matrix(ts)
        graphs.append(build_graph(conn, threshold, node_features(conn, ts), s.label, names, s.id))
    return graphs


def random_graph(rng: np.random.Generator, n: int, d: int, p: float = 0.3, label: int = 0, gid: str = "g") -> BrainGraph:
    iu, ju = np.triu_indices(n, k=1)
    keep = rng.random(iu.size) < p
    edges = np.stack([iu[keep], ju[keep]], axis=1).astype(np.int64)
    return BrainGraph(gid, label, rng.normal(size=(n, d)), edges, rng.uniform(-1, 1, keep.sum()),
                      default_region_names(n))


@pytest.fixture(scope="session")
def small_cohort():
    return cohort_graphs(SyntheticCohortSpec(n_subjects_per_class=10, n_regions=8, n_timepoints=120,
                                             planted_block=(0, 1, 2), coupling_strength=0.8, seed=3))


# one line per acceptance criterion, echoed at the end of the session
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
