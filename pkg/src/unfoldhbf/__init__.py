"""Deep-unfolded hybrid precoding for wideband massive MIMO."""
from .baselines import complexity_estimate, dbf_se, omp_hbf
from .channel import (ChannelTensor, SystemDims, dataset_read, dataset_write, generate_channel,
                      generate_dataset, optimal_digital_precoder)
from .estimators import (DigitalBF, FixedSCHBF, HeuristicSCHBF, ManNetHBF, OMPHBF, SubManNetHBF,
                         check_channels)
from .mannet import TrainConfig, UnfoldedNet, fc_hbf_design, model_read, model_write, train
from .subnet import (MappingMatrix, dynamic_mapping, fixed_mapping, heuristic_sc_hbf, sc_hbf_design,
                     select_best_subcarrier, submannet_train)

__version__ = "0.1.0"
