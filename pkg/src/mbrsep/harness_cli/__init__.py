"""Command-line surface: dataset synthesis, training, separation, evaluation and inspection."""
