from .main import (
    ScheduleKind,
    NoiseKind,
    NoiseSchedule,
    NoiseVariant,
    NoiseDraw,
    build_schedule,
    schedule_from_betas,
    forward_noise,
    expected_noise_norm,
    draw_noise,
    draw_noise_batch,
)

__all__ = [
    "ScheduleKind",
    "NoiseKind",
    "NoiseSchedule",
    "NoiseVariant",
    "NoiseDraw",
    "build_schedule",
    "schedule_from_betas",
    "forward_noise",
    "expected_noise_norm",
    "draw_noise",
    "draw_noise_batch",
]
