/* Bugs detection challenge: the child crashes, the parent waits. */
#include "forkaware_rt.h"

int main(void) {
    fa_init();
    fa_probe(FA_ROOT_ENTRY);
    if (fork() == 0) { /* child process */
        fa_probe(FA_CHILD_ENTRY(1));
        raise(SIGSEGV);
    } else { /* parent process */
        fa_probe(FA_PARENT_BRANCH);
        wait(NULL);
    }
    return 0;
}
