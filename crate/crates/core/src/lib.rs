//! A distributed evolutionary algorithm for the symmetric TSP in which each
//! node's agents share a blackboard and nodes exchange solutions by gossip.
//! The gossip period of every node adapts to the round-trip time it observes.

pub mod blackboard;
pub mod clock;
pub mod cluster;
pub mod experiment;
pub mod node;
pub mod operators;
pub mod scheduler;
pub mod transport;
pub mod tsp;
