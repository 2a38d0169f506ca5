# Knowledge injection laboratory: environment, perception, learners and harness
