"""Multi-modal speaker diarization with cross-attention fusion."""
