#pragma once

#include <stdexcept>
#include <string>

namespace cbv {

/// Base class for all library errors.
class Error : public std::runtime_error {
public:
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

#define CBV_DEFINE_ERROR(Name)                                        \
    class Name : public ::cbv::Error {                                \
    public:                                                           \
        explicit Name(const std::string& msg) : Error(msg) {}         \
    };

// numcore
CBV_DEFINE_ERROR(ShapeMismatch)
CBV_DEFINE_ERROR(ZeroVector)
CBV_DEFINE_ERROR(UnknownNode)
CBV_DEFINE_ERROR(EmptyProgram)
CBV_DEFINE_ERROR(CheckpointError)

// encoders
CBV_DEFINE_ERROR(SingleClassDataset)
CBV_DEFINE_ERROR(NonConvergence)
CBV_DEFINE_ERROR(UnknownLabel)

// trigger
CBV_DEFINE_ERROR(EmptyPairs)
CBV_DEFINE_ERROR(DivergedLoss)

// saliency
CBV_DEFINE_ERROR(UnknownClass)
CBV_DEFINE_ERROR(LengthMismatch)
CBV_DEFINE_ERROR(BadThreshold)

// diffusion
CBV_DEFINE_ERROR(BadRange)
CBV_DEFINE_ERROR(BadStep)
CBV_DEFINE_ERROR(NonFiniteState)

// harness
CBV_DEFINE_ERROR(ParseError)
CBV_DEFINE_ERROR(MissingFile)
CBV_DEFINE_ERROR(BadLabel)
CBV_DEFINE_ERROR(EmptyManifest)
CBV_DEFINE_ERROR(DuplicateRecord)
CBV_DEFINE_ERROR(EmptyClass)
CBV_DEFINE_ERROR(EmptyInput)
CBV_DEFINE_ERROR(BadConfig)

#undef CBV_DEFINE_ERROR

}  // namespace cbv
