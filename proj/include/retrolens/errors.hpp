#pragma once

#include <stdexcept>
#include <string>

namespace retrolens {

// Shape/dimension disagreement between tensors or between a tensor and an op contract.
struct ShapeError : std::invalid_argument {
    explicit ShapeError(const std::string& msg) : std::invalid_argument(msg) {}
};

// A parameter value outside its documented domain (opacity, sigma, ...).
struct ValueError : std::invalid_argument {
    explicit ValueError(const std::string& msg) : std::invalid_argument(msg) {}
};

// Every position of a mask is marked defect; attention has no context to draw from.
struct FullyMaskedError : ValueError {
    explicit FullyMaskedError(const std::string& msg) : ValueError(msg) {}
};

// An API contract was violated (non-scalar loss, frozen parameters mutated, ...).
struct ContractError : std::logic_error {
    explicit ContractError(const std::string& msg) : std::logic_error(msg) {}
};

struct IoError : std::runtime_error {
    explicit IoError(const std::string& msg) : std::runtime_error(msg) {}
};

// A required input artifact (checkpoint, dataset) is absent.
struct MissingPrerequisiteError : std::runtime_error {
    explicit MissingPrerequisiteError(const std::string& msg) : std::runtime_error(msg) {}
};

struct TrainingDivergedError : std::runtime_error {
    explicit TrainingDivergedError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace retrolens
