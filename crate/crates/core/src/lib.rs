//! Forensic triage of local LLM runner artifacts.
//!
//! Detects, parses, verifies and timelines the on-disk traces left by
//! Ollama, LM Studio and llama.cpp on Windows and Linux filesystem trees,
//! raw disk images and memory dumps. A companion corpus synthesizer
//! produces ground-truthed artifact trees so recovery behaviour is
//! testable end to end.

pub mod evidence;
pub mod gguf;
