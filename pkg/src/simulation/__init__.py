"""
Simulation module initialization
"""

from .optics_sim import (
    DEFAULT_FIELDS,
    ZERO_OFFSET,
    DomainConfig,
    FieldPoint,
    FovImageSet,
    IspConfig,
    LensInstance,
    MisalignmentOffset,
    PsfFamilyParams,
    PsfKernel,
    ToleranceSpec,
    draw_lens,
    isp_forward,
    isp_inverse,
    make_psf,
    render_ideal_crosshair,
    simulate_capture,
    source_clean_domain,
    source_isp_domain,
    target_domain,
)
from .sampling import SamplingConfig, grid_count, grid_positions
from .prealign import prealign
from .dataset import (
    Dataset,
    build_eval_datasets,
    build_oracle_dataset,
    build_source_dataset,
    build_target_dataset,
    load_dataset,
    save_dataset,
)
