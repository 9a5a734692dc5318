#pragma once

#include <stdexcept>
#include <string>

namespace cgssl {

// Base for every error raised by the library. Subclasses name the failure class.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class InvalidInput : public Error {
public:
    using Error::Error;
};

class InvalidSpec : public Error {
public:
    using Error::Error;
};

class InvalidArchitecture : public Error {
public:
    using Error::Error;
};

class IngestionError : public Error {
public:
    using Error::Error;
};

class DivergenceError : public Error {
public:
    DivergenceError(const std::string& what, long step) : Error(what), step_(step) {}
    long step() const { return step_; }

private:
    long step_;
};

// A pipeline stage failed; carries the stage name for attribution.
class StageError : public Error {
public:
    StageError(std::string stage, const std::string& what)
        : Error(stage + ": " + what), stage_(std::move(stage)) {}
    const std::string& stage() const { return stage_; }

private:
    std::string stage_;
};

// A prerequisite artifact is missing from the run directory.
class MissingArtifact : public Error {
public:
    using Error::Error;
};

}  // namespace cgssl
