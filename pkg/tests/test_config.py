from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cellflow.config import Config, SimSettings, SweepSpec, dumps, load_config, loads, split_engine
from cellflow.errors import ConfigError
from cellflow.model import CellScenario, Distribution, TrafficClass
from cellflow.network import NetworkTopology

CONFIGS = sorted((Path(__file__).parent.parent / "configs").glob("*.toml"))

BASE = """
[cell]
capacity_mbps = 50

[[class]]
name = "static"
arrival_rate = 0.1
mean_volume_mbit = 100

[[class]]
name = "mobile"
arrival_rate = 0.1
mean_volume_mbit = 100
"""


def test_units_and_defaults():
    cfg = loads(BASE + "speed_kmh = 36\nmean_distance_m = 100\nsojourn_dist = \"uniform\"\n")
    cell = cfg.cell
    assert cell.capacity == 50e6
    assert cell.classes[0].mean_volume == 100e6 and cell.classes[0].is_static
    assert cell.classes[1].mobility_rate == pytest.approx(0.1)
    assert cell.classes[1].sojourn_dist == Distribution("uniform", 1 / cell.classes[1].mobility_rate)
    assert cfg.topology is None and cfg.sweep is None


@pytest.mark.parametrize("text", [
    "",
    "[cell]\ncapacity_mbps = 50\n",
    BASE.replace("capacity_mbps = 50", "capacity_mbps = 50\ncapacity_bps = 5e7"),
    BASE + "mobility_rate = -1\n",
    BASE + "mobility_rate = 0.1\nbogus = 1\n",
    BASE + "sojourn_dist = \"pareto2\"\n",
    BASE + "mobility_rate = 0.1\nvolume_dist = \"weibull\"\n",
    BASE + "mobility_rate = 0.1\nkind = \"static\"\n",
    BASE + "mobility_rate = 0.1\n[sweep]\nparameter = \"rho_s\"\nvalues = []\n",
    BASE + "mobility_rate = 0.1\n[sweep]\nparameter = \"rho_s\"\nvalues = [0.2, 0.1]\n",
    BASE + "mobility_rate = 0.1\n[sweep]\nparameter = \"load\"\nvalues = [0.1]\n",
    BASE + "mobility_rate = 0.1\n[sweep]\nparameter = \"speed\"\nvalues = [1.0]\n",
    BASE + "mobility_rate = 0.1\n[network]\ntopology = \"star(3)\"\n",
    BASE + "mobility_rate = 0.1\n[network]\ncapacities_mbps = [50, 50]\n",
    "schema_version = 2\n" + BASE,
    "this is not toml",
])
def test_rejects_bad_configs(text):
    with pytest.raises(ConfigError):
        loads(text)


def test_explicit_network():
    cfg = loads(BASE + """mobility_rate = 0.5
[network]
capacities_mbps = [50, 80]
arrival_rates = [[0.1, 0.1], [0.2, 0.05]]
[network.routing]
mobile = [[0, 1], [1, 0]]
""")
    topo = cfg.topology
    assert [c.capacity for c in topo.cells] == [50e6, 80e6]
    assert topo.cells[1].arrival_rates.tolist() == [0.2, 0.05]
    assert cfg.ring_size is None
    back = loads(dumps(cfg))
    assert back.topology.cells == topo.cells
    np.testing.assert_array_equal(back.topology.routing["mobile"], topo.routing["mobile"])


def test_engine_names():
    assert split_engine("fixed-point:qs") == ("fixed-point", "qs")
    assert split_engine("fixed-point", "qs") == ("fixed-point", "qs")
    assert split_engine("sim") == ("sim", "")
    for bad in ("sim:qs", "fixed-point:sim", "exact"):
        with pytest.raises(ConfigError):
            split_engine(bad)


@pytest.mark.parametrize("path", CONFIGS, ids=[p.name for p in CONFIGS])
def test_checked_in_configs_load_and_round_trip(path):
    cfg = load_config(path)
    text = dumps(cfg)
    assert dumps(loads(text)) == text
    assert loads(text).cell == cfg.cell


finite = st.floats(1e-6, 1e6, allow_nan=False, allow_infinity=False)


@st.composite
def configs(draw):
    cap = draw(finite)
    fams = ["exponential", "deterministic", "uniform", "pareto1", "pareto2"]
    classes = []
    for i in range(draw(st.integers(1, 3))):
        vol = draw(finite)
        theta = draw(st.one_of(st.just(0.0), finite))
        fam = draw(st.sampled_from(fams + ["hyperexp2"]))
        vd = Distribution(fam, vol, draw(st.floats(1, 20)) if fam == "hyperexp2" else None)
        sd = Distribution(draw(st.sampled_from(fams)), 1 / theta) if theta > 0 else None
        classes.append(TrafficClass(f"c{i}", draw(st.floats(0, 1e3)), vol, theta, vd, sd))
    cell = CellScenario(cap, tuple(classes))
    mobile = [c.name for c in classes if not c.is_static]
    topo, ring = None, None
    if draw(st.booleans()):
        ring = draw(st.integers(1, 5))
        topo = NetworkTopology.ring(cell, ring)
    sweep = None
    if draw(st.booleans()):
        vals = sorted(set(draw(st.lists(st.floats(0, 10), min_size=1, max_size=5))))
        sweep = SweepSpec("theta", tuple(vals), ("markov", "fixed-point:qs"), draw(st.floats(0, 1)))
    return Config(cell, topo, sweep, SimSettings(draw(st.integers(2, 50)), draw(st.integers(10, 10**7)),
                                                 draw(st.one_of(st.none(), st.integers(0, 2**63)))), ring)


@settings(max_examples=60, deadline=None)
@given(configs())
def test_round_trip_is_exact(cfg):
    back = loads(dumps(cfg))
    assert back.cell == cfg.cell
    assert back.sweep == cfg.sweep
    assert back.sim == cfg.sim
    assert back.ring_size == cfg.ring_size
    if cfg.topology is not None:
        for name, mat in cfg.topology.routing.items():
            np.testing.assert_array_equal(back.topology.routing[name], mat)
