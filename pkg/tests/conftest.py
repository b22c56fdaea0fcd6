from dataclasses import dataclass

import pytest

from evacflow.experiments import evac_feature_array, prepare_traffic, train_forecaster
from evacflow.models import ModelConfig
from evacflow.synthetic import (
    ScenarioConfig,
    evacuation_period_traffic,
    generate_network,
    generate_regular_traffic,
    inject_evacuation,
)
from evacflow.training import TrainConfig


@dataclass
class Tiny:
    config: ScenarioConfig
    graph: object
    regular: object  # WindowData
    evac: object  # WindowData with evacuation features attached
    evac_frame: object
    fitted: object  # Fitted pretrained forecaster


@pytest.fixture(scope="session")
def tiny() -> Tiny:
    """Six detectors, two weeks of regular traffic, a four-day evacuation, a briefly trained model."""
    cfg = ScenarioConfig(corridors=2, nodes_per_corridor=3, regular_days=14, evac_days=4, seed=0)
    g = generate_network(cfg)
    regular, _ = prepare_traffic(generate_regular_traffic(g, cfg), g)
    fitted = train_forecaster(regular, ModelConfig(g.size, 11, hidden_size=8), TrainConfig(lr=3e-3, max_epochs=3))
    ev = inject_evacuation(evacuation_period_traffic(g, cfg), g, cfg)
    evac, _ = prepare_traffic(ev.series, g)
    evac.evac = evac_feature_array(ev.features, evac.timestamps, g.ids)
    return Tiny(cfg, g, regular, evac, ev.features, fitted)
