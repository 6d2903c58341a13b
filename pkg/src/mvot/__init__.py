"""Multi-vault obfuscated templates: chaff-hidden biometric sub-templates
with k-of-n hash commitments."""
from .embedding import as_embedding, canonical_decode, canonical_encode, cosine_similarity, hash_entry_tuple
from .sources import ChaffSource, ChannelSet, CosineDist, Population, PopulationSpec, derive_channels, generate_chaff, ingest_embeddings, sample_population
from .vault import HelperData, ProtocolParams, enroll, keygen, revoke_and_reenroll, verify
from .container import deserialize_helper, serialize_helper

__version__ = "0.1.0"
