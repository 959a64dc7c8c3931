import pytest

from fabdb.oracle import OracleOptions
from fabdb.txn import Cluster, ClusterConfig


def small_cluster(**overrides) -> Cluster:
    base = dict(
        memory_servers=2,
        compute_servers=1,
        threads_per_server=1,
        heap_size=8 << 20,
        overflow_size=2 << 20,
        journal_size=1 << 20,
        capture_events=True,
    )
    base.update(overrides)
    if "oracle" in base and isinstance(base["oracle"], dict):
        base["oracle"] = OracleOptions(**base["oracle"])
    return Cluster(ClusterConfig(**base))


@pytest.fixture
def cluster():
    c = small_cluster()
    yield c
    c.stop()


@pytest.fixture
def cluster4():
    c = small_cluster(memory_servers=4)
    yield c
    c.stop()
