//! Analytic coherence references, detector-bias corrections and fits.

pub mod corrections;
pub mod fit;
pub mod lm;
pub mod quadrature;
pub mod table1;
pub mod vcz;

pub use corrections::{correct_auto, correct_cross, mix_g2, AfterpulseProfile, CorrectionError, MixComponent};
pub use fit::{
    fit_cosine, fit_exponential, fit_near_field, parse_fit_points, write_fit_points, CosineFit, ExponentialFit, FitError,
    FitPoint, FitResult, NearFieldOptions,
};
pub use lm::{levenberg_marquardt, LmOptions, LmResult};
pub use table1::{table1_g1, table1_g2, LightState, LightStateModel};
pub use vcz::{
    cosine_visibility, fresnel_number, g2_cosine_profile, g2_uniform, g2_vcz, mode_count, sinc, vcz_visibility,
    CosineModulated, NearField, UniformSlab, VczError,
};
