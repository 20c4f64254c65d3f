pub mod curvature;
pub mod error;
pub mod gns;
pub mod heisenberg;
pub mod lab;
pub mod modfunc;
pub mod nctorus;
pub mod psymbol;
pub mod quad;
