"""Multi-operator DeepONets: per-operator trunk networks around one shared branch network."""

from .autodiff import (MlpParams, finite_difference_grad, gradcheck_suite, mlp_backward, mlp_forward,
                       mlp_init, optimizer_init, optimizer_step)
from .bench import (ExperimentConfig, ResultsTable, emit_solution_plotdata, emit_table, experiment_config,
                    run_experiment)
from .estimators import DeepONetRegressor, MODNORegressor
from .exceptions import (ConfigError, DegenerateTargetError, ModnoError, ShapeError, SolverDivergenceError,
                         StageError, TrainingDivergenceError)
from .metrics import relative_l2, relative_l2_set
from .models import (DonModel, ModnoModel, QueryBatch, don_predict, global_loss_and_grads, init_don,
                     init_modno, load_model, local_loss_and_grads, modno_predict, save_model)
from .trainer import (CostLedger, TrainConfig, TrainHistory, cost_modno, cost_sol, subsample_for_shared,
                      train_modno, train_single_don)

__version__ = "0.1.0"
