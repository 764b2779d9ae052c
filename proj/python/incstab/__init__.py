"""Neural incremental-stability certificates for black-box plants."""

from ._incstab import (
    Activation,
    BoxBarrier,
    BoxDomain,
    ConfigError,
    ContractViolation,
    DivergenceError,
    DomainError,
    Error,
    FeedforwardNet,
    IncompleteBudgetError,
    LipschitzBudget,
    NotPositiveDefiniteError,
    PlantError,
    SampleCover,
    System,
    benchmark,
    build_cover,
    certify_network_lipschitz,
    compose_overall_L,
    estimate_plant_lipschitz,
    load_net,
    loss_validity,
    run,
    simulate,
    verify_cover,
)

__all__ = [name for name in dir() if not name.startswith("_")]
