from __future__ import annotations

import json

from kernorch.bundled import BUILDERS, example_path, load_example, write_all
from kernorch.cost import CostModelConfig
from kernorch.graph_ir import canonical_hash, validate


def test_data_files_match_builders(tmp_path):
    write_all(tmp_path)
    data = example_path("softmax").parent
    for path in sorted(tmp_path.iterdir()):
        assert (data / path.name).read_text() == path.read_text(), path.name


def test_examples_load_and_validate():
    for name, build in BUILDERS.items():
        g = load_example(name)
        assert validate(g).ok, name
        assert canonical_hash(g) == canonical_hash(build())


def test_mutual_cycle_cost_model_file():
    path = example_path("mutual_cycle").with_name("mutual_cycle.cost.json")
    assert not CostModelConfig.load(path).single_output_only
    assert json.loads(path.read_text()) == {"single_output_only": False}
