pub mod asymptotics;
pub mod bounds;
pub mod entropy;
pub mod error;
pub mod harness;
pub mod linalg;
pub mod mesh;
pub mod run;
pub mod scheme;
pub mod solver;
pub mod specmat;
