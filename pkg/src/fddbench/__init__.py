"""Benchmark toolkit for evasion attacks and defenses on fault-diagnosis models.

Workflow: generate or ingest sensor runs (``data``), train sliding-window
classifiers (``models``), attack them under a max-abs perturbation budget
(``attacks``), harden them (``defenses``), and sweep accuracy over a grid of
attack strengths into CSV/JSON/SVG reports (``sweep``). The ``cli`` module
drives everything from the command line.
"""

__version__ = "0.1.0"

from .autodiff import Tensor, backward, finite_diff_check
from .data import (RunSet, Run, Standardizer, WindowedDataset, fit_standardizer,
                   apply_standardizer, make_windows, synth_generate, split,
                   prepare_datasets, load_runs)
from .models import (ModelConfig, Classifier, AutoencoderModel, TrainReport,
                     build_model, train, accuracy, train_autoencoder,
                     save_model, load_model, desk_config, full_scale_config)
from .attacks import (AttackSpec, AdversarialBatch, PredictOracle, attack_noise,
                      attack_fgsm, attack_fgsm_distill, attack_pgd,
                      attack_deepfool, attack_cw, attack_batch)
from .defenses import (DefenseSpec, ComboSpec, QuantizerGrid, ProtectedClassifier,
                       fit_quantizer, apply_quantizer, defend, defend_adv_training,
                       defend_autoencoder, defend_quantization, defend_regularization,
                       defend_distillation, defend_combination, save_protected,
                       load_protected)
from .sweep import SweepConfig, SweepReport, run_sweep, emit_report, compare_reports
