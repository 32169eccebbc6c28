import pytest

from trustgate.ontology import bootstrap_vocabulary
from trustgate.store import Graph, SYN_NS
from trustgate.synth import GeneratorSpec, demographics_manifest, generate_dataset


@pytest.fixture(scope="session")
def demo_spec():
    return GeneratorSpec(seed=11, patient_count=24)


@pytest.fixture(scope="session")
def demo_manifest(demo_spec):
    return demographics_manifest(demo_spec)


@pytest.fixture()
def demo_graph(demo_spec):
    graph = Graph()
    bootstrap_vocabulary(graph)
    generate_dataset(demo_spec, into=graph)
    return graph


@pytest.fixture()
def stripped_graph(demo_spec):
    """Same fixture with observation properties stripped, for the
    incomplete-data scenarios."""
    graph = Graph()
    bootstrap_vocabulary(graph)
    generate_dataset(
        demo_spec, into=graph, strip_property_categories=[SYN_NS + "Observation"]
    )
    return graph
