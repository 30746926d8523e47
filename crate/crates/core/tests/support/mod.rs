#![allow(
    dead_code,
    clippy::approx_constant,
    clippy::excessive_precision,
    clippy::needless_range_loop,
    clippy::too_many_arguments,
    clippy::type_complexity
)]

pub mod cases;
pub mod dd;
pub mod fixture;
pub mod reference;
