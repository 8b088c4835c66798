"""facecap: face-attribute records -> LLM appearance captions -> training manifests."""

from ._version import __version__
from .bow import BagOfWords, assemble_bow, attribute_to_phrase
from .config import PipelineConfig, load_config
from .dataset import (
    DatasetManifest,
    ManifestEntry,
    export_training_manifest,
    resume_filter,
    sample_caption,
    stats_report,
    write_entries,
)
from .debias import DebiasRule, apply_debias, cooccurrence_stats
from .derive import (
    AgePhrase,
    DerivedAttributes,
    derive_parsing_attributes,
    dominant_emotions,
    sample_age_phrase,
)
from .filtering import DatasetProfile, FilterVerdict, check_image, compute_crop
from .fusion import (
    CaptionSet,
    FusionPrompt,
    HttpLlmClient,
    MockLlmClient,
    build_prompt,
    fuse_captions,
    mock_fuse,
    validate_caption,
)
from .schema import AttributeRecord, SchemaError, parse_record, serialize_record

__all__ = [
    "__version__",
    "AgePhrase",
    "AttributeRecord",
    "BagOfWords",
    "CaptionSet",
    "DatasetManifest",
    "DatasetProfile",
    "DebiasRule",
    "DerivedAttributes",
    "FilterVerdict",
    "FusionPrompt",
    "HttpLlmClient",
    "ManifestEntry",
    "MockLlmClient",
    "PipelineConfig",
    "SchemaError",
    "apply_debias",
    "assemble_bow",
    "attribute_to_phrase",
    "build_prompt",
    "check_image",
    "compute_crop",
    "cooccurrence_stats",
    "derive_parsing_attributes",
    "dominant_emotions",
    "export_training_manifest",
    "fuse_captions",
    "load_config",
    "mock_fuse",
    "parse_record",
    "resume_filter",
    "sample_age_phrase",
    "sample_caption",
    "serialize_record",
    "stats_report",
    "validate_caption",
    "write_entries",
]
