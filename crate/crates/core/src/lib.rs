pub mod banach_geometry;
pub mod convex_kernel;
pub mod lattice_system;
pub mod myksoda;
pub mod harness;
