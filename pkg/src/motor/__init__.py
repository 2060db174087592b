"""Knowledge-enhanced multimodal pretraining at desk scale."""

__version__ = "0.1.0"

from .config import RunConfig, load_config
from .corpus import Corpus, gen_corpus, gen_vqa
from .graph import KnowledgeGraph, load_graph
from .model import MotorModel
from .queues import FeatureQueue, momentum_update
from .tokenizer import Tokenizer
from .triplets import EntityLexicon, Triplet, TripletStore

__all__ = [
    "Corpus", "EntityLexicon", "FeatureQueue", "KnowledgeGraph", "MotorModel",
    "RunConfig", "Tokenizer", "Triplet", "TripletStore", "gen_corpus", "gen_vqa",
    "load_config", "load_graph", "momentum_update", "__version__",
]
