"""Desk-scale text dataset distillation laboratory."""

from . import autodiff, coreset, data, distill, evaluate, models, optim, synthesis
from .autodiff import Tensor, backward
from .coreset import herding_select, kcenters_select, kmeans, random_select
from .data import (LabeledDataset, Sample, TaskBundle, Vocab, build_task,
                   encode_for_generator, load_jsonl, load_tsv,
                   make_synthetic_task)
from .distill import (DistillConfig, SynPool, TeacherBank, build_teacher_bank,
                      diverse_minibatch, generator_step, gm_loss,
                      policy_gradient_rewards, run_distillation,
                      weighted_syn_loss)
from .evaluate import (EvalProtocol, EvalReport, MethodArtifacts, ablation,
                       compare_methods, cross_model, dpc_sweep, train_and_score,
                       welch_t_test)
from .models import (GeneratorConfig, GeneratorModel, LearnerConfig,
                     LearnerModel, load_generator, nucleus_filter,
                     save_generator)
from .optim import Optimizer, warmup_cosine
from .synthesis import (DistilledDataset, generate_distilled,
                        pretrain_generator, train_feature_extractor)

__version__ = "0.1.0"
