pub mod grad_cases;
pub mod removed;
