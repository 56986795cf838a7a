"""Game-theoretic neuron filtering for convolutional and dense networks, in NumPy."""

from .coalition import ConfigurationState, NeighborhoodSystem, neighbor_pairs, partition
from .layer import NeurogameLayer, NeurogameLayerConfig
from .models import BUILDERS, Model, ModelSpec, count_params, load_checkpoint, save_checkpoint
from .shapley import extract_strong, shapley_exact, shapley_monte_carlo
from .statmech import EnergyParams, energy, gibbs_layer, payoff, score_layer, temperature

__version__ = "0.1.0"
