"""Conformal outlier detection for zero-shot classification with contrastive embeddings."""

__version__ = "0.1.0"

from .conformal import (NO_ADMISSION, ConformalDecision, Mode, RequiredCoverage, decide,
                        p_value, threshold_at)
from .errors import (ConfigError, ConformalError, DegenerateQuery, DegenerateRow, DuplicateId,
                     FormatError, IoError, ShapeError, UndefinedAuroc, UnsupportedLayout)
from .harness import (CoverageReport, SimulationSpec, knnd_report, render_report,
                      run_coverage_sim)
from .io import (CalibrationModel, EmbeddingMatrix, LabelTable, ScoreKind, ScoreSeries,
                 load_calibration, load_labels, load_npy, load_scores, store_calibration,
                 store_labels, store_npy, store_scores)
from .knn import KnnConfig, KnnResult, knnd, knnd_bruteforce
from .metrics import cosine_distance, normalize_rows, pairwise_s_i
from .synth import SynthDataset, SynthSpec, generate, split
from .zeroshot import (LabelQuery, RocCurve, build_label_query, evaluate_tpr_fpr, roc_auc,
                       stratify, zeroshot_scores)
