from .imageio import (IngestionError, load_image, read_pgm16, read_ppm, write_pgm16,
                      write_ppm)
from .manifest import (FrameRecord, GeoPhotoRecord, ManifestError, read_frame_manifest,
                       read_photo_manifest, write_manifest)
from .pairs import PairExample, PairSet, as_pairset
from .primitives import BoundsError, circular_mask, extract_patch, to_primitive
from .samplers import (SamplingError, audit_frame_pairs, audit_geo_pairs, audit_patch_pairs,
                       haversine, sample_frame_pairs, sample_geo_pairs, sample_patch_pairs)
from .synth import (GeoConfig, MosaicConfig, SceneVideoConfig, gen_geo_collection,
                    gen_mosaic_dataset, gen_scene_video)
