"""Decentralized federated learning over vehicular networks, at desk scale.

Vehicles moving on a road network train a shared classifier without any
server: each epoch a vehicle mixes the models of whoever is in radio range.
The headline strategy picks its mixing weights by driving the mixed
contribution profile (a per-vehicle state vector updated alongside the
model) as close as possible to the fleet's sample-proportional target,
measured in KL divergence. Sample-count-proportional gossip and subgradient
push-sum ride along as baselines.
"""
from .aggregation import (
    StepParams,
    VehicleRuntime,
    WeightVector,
    aggregate_models,
    brute_force_weights,
    dds_vehicle_step,
    dfl_vehicle_step,
    dfl_weights,
    epoch_exchange,
    kl_objective_and_gradient,
    solve_weights,
    sp_vehicle_step,
)
from .data import (
    Dataset,
    Partition,
    TargetVector,
    gen_synthetic,
    partition_balanced_noniid,
    partition_unbalanced_iid,
    target_vector,
)
from .learner import (
    LossReport,
    ModelParams,
    evaluate,
    full_gradient,
    init_model,
    local_epochs,
    local_update,
)
from .metrics import (
    EpochMetrics,
    MetricsLog,
    consensus_distance,
    epochs_to_target,
    pearson,
)
from .mobility import (
    FleetState,
    NeighborSets,
    comm_graph,
    init_fleet,
    step_fleet,
    vehicle_positions,
)
from .road_network import (
    RoadGraph,
    degree_histogram,
    gen_grid,
    gen_random,
    gen_spider,
    graph_from_json,
    graph_to_json,
)
from .sim_runner import (
    SimConfig,
    config_from_dict,
    load_config,
    run,
    write_metrics_csv,
)
from .state_diversity import (
    StateVector,
    entropy,
    kl_divergence,
    local_increment,
    mix,
    normalize,
    zero_state,
)

__version__ = "0.1.0"
