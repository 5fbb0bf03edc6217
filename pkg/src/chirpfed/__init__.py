"""Deterministic simulator for chirp-based underwater acoustic links with a
neural receiver trained by federated meta-learning, plus the closed-form
convergence-bound calculator."""

__version__ = "0.1.0"

from .chirp import (ChirpParams, ComplexityReport, Waveform, downsample,
                    dnn_op_count, generate_chirp, matched_filter_detect,
                    mf_op_count, modulate_frame)
from .channel import (ChannelRealization, ImpairmentSpec, RayleighModelConfig,
                      apply_channel, apply_doppler, apply_sto, bell_spectrum,
                      load_cir, rayleigh_cir, save_cir)
from .receiver import (LabeledBatch, MlpParams, ber_eval, detect, forward,
                       grad, hvp, init_params, loss)
from .federation import (FmlConfig, NodeState, RoundLog, aggregate,
                         local_fedavg_step, local_maml_step, run_rounds,
                         schedule)
from .bound import (DerivedConstants, QuadraticFederationSpec,
                    SmoothnessConstants, derive_constants,
                    empirical_rounds_to_gap, m_of_T, tz_bound)
from .data import (DatasetSpec, DomainShift, SymbolSet, build_node_dataset,
                   load_dataset, save_dataset, shift_domain)
